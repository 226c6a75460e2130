use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::MultichannelWave;
use crate::error::{Error, Result};

/// Per-channel short-time spectra split into magnitude and phase.
#[derive(Clone, Debug)]
pub struct StftTensor {
    /// `C x T x G`
    pub magnitude: Array3<f64>,
    /// `C x T x G`, radians in `(-pi, pi]`
    pub phase: Array3<f64>,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub hop_samples: usize,
    pub sample_rate: u32,
}

impl StftTensor {
    pub fn channels(&self) -> usize {
        self.magnitude.dim().0
    }

    pub fn frames(&self) -> usize {
        self.magnitude.dim().1
    }

    pub fn bins(&self) -> usize {
        self.magnitude.dim().2
    }
}

/// Reflection about the first and last samples, repeated as needed.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub(crate) fn window_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Hann-windowed STFT with reflect center padding.
///
/// Frame `t` is centred on sample `t * hop`, giving `ceil(L / hop)` frames
/// and `n_fft / 2 + 1` bins with `n_fft` equal to the window length.
pub fn stft(wave: &MultichannelWave, window_ms: f64, hop_ms: f64) -> Result<StftTensor> {
    if !(hop_ms > 0.0) || !(window_ms > 0.0) {
        return Err(Error::invalid("window and hop must be positive"));
    }
    if window_ms < hop_ms {
        return Err(Error::invalid("window must not be shorter than hop"));
    }
    let sr = wave.sample_rate();
    let n_fft = window_samples(window_ms, sr);
    let hop = window_samples(hop_ms, sr);
    if n_fft == 0 || hop == 0 {
        return Err(Error::invalid("window or hop shorter than one sample"));
    }
    let len = wave.len();
    let frames = len.div_ceil(hop);
    let bins = n_fft / 2 + 1;
    let pad = (n_fft / 2) as isize;
    let window = periodic_hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let channels = wave.channels();
    let mut magnitude = Array3::zeros((channels, frames, bins));
    let mut phase = Array3::zeros((channels, frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for c in 0..channels {
        let x = wave.samples().row(c);
        for t in 0..frames {
            let start = (t * hop) as isize - pad;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[reflect(start + n as isize, len)] * window[n], 0.0);
            }
            fft.process(&mut buf);
            for g in 0..bins {
                magnitude[[c, t, g]] = buf[g].norm();
                let mut p = buf[g].im.atan2(buf[g].re);
                if p <= -PI {
                    p = PI;
                }
                phase[[c, t, g]] = p;
            }
        }
    }
    Ok(StftTensor {
        magnitude,
        phase,
        window_ms,
        hop_ms,
        n_fft,
        hop_samples: hop,
        sample_rate: sr,
    })
}

/// `C x T x 3 x G` planes: magnitude, cos(phase), sin(phase).
#[derive(Clone, Debug)]
pub struct MagPhaseFeatureTensor {
    pub values: Array4<f64>,
}

impl MagPhaseFeatureTensor {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn bins(&self) -> usize {
        self.values.dim().3
    }
}

pub fn mag_phase_features(spec: &StftTensor) -> MagPhaseFeatureTensor {
    let (c, t, g) = spec.magnitude.dim();
    let values = Array4::from_shape_fn((c, t, 3, g), |(c, t, p, g)| match p {
        0 => spec.magnitude[[c, t, g]],
        1 => spec.phase[[c, t, g]].cos(),
        _ => spec.phase[[c, t, g]].sin(),
    });
    MagPhaseFeatureTensor { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn default_geometry() {
        let wave = MultichannelWave::new(Array2::zeros((2, 16000)), 16000).unwrap();
        let s = stft(&wave, 25.0, 10.0).unwrap();
        assert_eq!(s.n_fft, 400);
        assert_eq!(s.bins(), 201);
        assert_eq!(s.frames(), 100);
        assert_eq!(s.channels(), 2);
    }

    #[test]
    fn dc_input_concentrates_in_bin_zero() {
        let wave = MultichannelWave::mono(vec![1.0; 4000], 16000).unwrap();
        let s = stft(&wave, 25.0, 10.0).unwrap();
        for t in 0..s.frames() {
            let row = s.magnitude.slice(ndarray::s![0usize, t, ..]);
            // sum of a periodic Hann window of length 400
            assert!((row[0] - 200.0).abs() < 1e-9);
            assert!(row.iter().skip(2).all(|&m| m < 1e-9));
            assert_eq!(s.phase[[0, t, 0]], 0.0);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let wave = MultichannelWave::mono(vec![0.0; 100], 16000).unwrap();
        assert!(stft(&wave, 25.0, 0.0).is_err());
        assert!(stft(&wave, 5.0, 10.0).is_err());
        assert!(MultichannelWave::mono(vec![], 16000).is_err());
    }

    #[test]
    fn phase_planes_are_unit_circle() {
        let samples: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 113) as f64 / 56.0 - 1.0).collect();
        let wave = MultichannelWave::mono(samples, 16000).unwrap();
        let mp = mag_phase_features(&stft(&wave, 25.0, 10.0).unwrap());
        let (c, t, _, g) = mp.values.dim();
        for ci in 0..c {
            for ti in 0..t {
                for gi in 0..g {
                    let (co, si) = (mp.values[[ci, ti, 1, gi]], mp.values[[ci, ti, 2, gi]]);
                    assert!((co * co + si * si - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
