use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frontend::MultichannelWave;

/// Full linear convolution through the FFT; output length `a + b - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// A dry signal and the sample at which it starts in the mixture.
#[derive(Clone, Debug)]
pub struct DelayedSource {
    pub signal: Vec<f64>,
    pub start_sample: usize,
}

/// Convolves each source with its per-microphone RIRs (`rirs[source][mic]`),
/// shifts it to its start sample and sums per microphone. Start samples must
/// strictly increase from one source to the next.
pub fn mix_with_delays(
    sources: &[DelayedSource],
    rirs: &[Vec<Vec<f64>>],
    sample_rate: u32,
) -> Result<MultichannelWave> {
    if sources.is_empty() {
        return Err(Error::invalid("nothing to mix"));
    }
    if rirs.len() != sources.len() {
        return Err(Error::shape(format!("{} sources but {} RIR sets", sources.len(), rirs.len())));
    }
    if sources.windows(2).any(|w| w[1].start_sample <= w[0].start_sample) {
        return Err(Error::invalid("source start offsets must strictly increase"));
    }
    let mics = rirs[0].len();
    if mics == 0 || rirs.iter().any(|r| r.len() != mics) {
        return Err(Error::shape("every source needs one RIR per microphone"));
    }
    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); mics];
    for (src, per_mic) in sources.iter().zip(rirs) {
        if src.signal.is_empty() {
            return Err(Error::invalid("empty source signal"));
        }
        for (out, rir) in channels.iter_mut().zip(per_mic) {
            let wet = fft_convolve(&src.signal, rir);
            let end = src.start_sample + wet.len();
            if out.len() < end {
                out.resize(end, 0.0);
            }
            for (o, w) in out[src.start_sample..end].iter_mut().zip(&wet) {
                *o += w;
            }
        }
    }
    let len = channels.iter().map(Vec::len).max().unwrap_or(0);
    let samples = Array2::from_shape_fn((mics, len), |(m, i)| channels[m].get(i).copied().unwrap_or(0.0));
    MultichannelWave::new(samples, sample_rate)
}

/// Start times: the first speaker at 0, each later one uniformly within
/// `(0, previous duration]` after the previous start.
pub fn sample_offsets<R: Rng + ?Sized>(rng: &mut R, durations_s: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(durations_s.len());
    let mut start = 0.0;
    for (i, _) in durations_s.iter().enumerate() {
        if i > 0 {
            let u: f64 = rng.random();
            start += durations_s[i - 1] * (1.0 - u);
        }
        out.push(start);
    }
    out
}
