use std::f64::consts::PI;

use super::room::{distance, Point3, RoomSpec};
#[cfg(test)]
use super::room::AbsorptionModel;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Taps of the windowed-sinc fractional delay filter.
pub const SINC_TAPS: usize = 81;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSource {
    pub position: Point3,
    /// Total number of wall reflections.
    pub order: usize,
    /// Lattice index and mirror flags, for bookkeeping and tests.
    pub cell: [i64; 3],
    pub mirrored: [bool; 3],
}

/// All images of `source` with at most `max_order` reflections.
pub fn enumerate_images(room: &RoomSpec, source: Point3, max_order: usize) -> Vec<ImageSource> {
    let n = max_order.min(1 << 20) as i64;
    let mut out = Vec::new();
    for_each_image(room, source, max_order, [n; 3], |img| out.push(img));
    out
}

/// Calls `f` for every image with at most `max_order` reflections in the
/// lattice cells `-reach..=reach` per axis.
fn for_each_image(room: &RoomSpec, source: Point3, max_order: usize, reach: [i64; 3], mut f: impl FnMut(ImageSource)) {
    let max_order = max_order as u64;
    for nx in -reach[0]..=reach[0] {
        for ny in -reach[1]..=reach[1] {
            for nz in -reach[2]..=reach[2] {
                let cell = [nx, ny, nz];
                for flags in 0..8u8 {
                    let mirrored = [flags & 1 != 0, flags & 2 != 0, flags & 4 != 0];
                    let mut position = [0.0; 3];
                    let mut order = 0u64;
                    for k in 0..3 {
                        let q = mirrored[k] as i64;
                        let sign = if mirrored[k] { -1.0 } else { 1.0 };
                        position[k] = sign * source[k] + 2.0 * cell[k] as f64 * room.dims[k];
                        order += (cell[k] - q).unsigned_abs() + cell[k].unsigned_abs();
                    }
                    if order <= max_order {
                        f(ImageSource {
                            position,
                            order: order as usize,
                            cell,
                            mirrored,
                        });
                    }
                }
            }
        }
    }
}

/// Reflection order that reaches every image within `c * duration_s`.
pub fn adaptive_max_order(room: &RoomSpec, duration_s: f64) -> usize {
    let reach: f64 = room.dims.iter().map(|d| SPEED_OF_SOUND * duration_s / d).sum();
    reach.ceil() as usize + 3
}

/// Adds a Hann-windowed sinc impulse of height `gain` at fractional
/// position `delay` (samples) into `out`, dropping taps outside the buffer.
pub fn add_fractional_impulse(out: &mut [f64], delay: f64, gain: f64) {
    let half = (SINC_TAPS / 2) as i64;
    let base = delay.floor();
    let frac = delay - base;
    let base = base as i64;
    if frac == 0.0 {
        if base >= 0 && (base as usize) < out.len() {
            out[base as usize] += gain;
        }
        return;
    }
    // sin(pi (k - frac)) = -(-1)^k sin(pi frac); the window's cosine is
    // advanced by rotation.
    let s = (PI * frac).sin();
    let step = PI / (half as f64 + 1.0);
    let (rot_s, rot_c) = step.sin_cos();
    let lo = -half + 1;
    let (mut ws, mut wc) = (step * (lo as f64 - frac)).sin_cos();
    for k in lo..=half {
        let idx = base + k;
        if idx >= 0 && (idx as usize) < out.len() {
            let x = k as f64 - frac;
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            let window = 0.5 * (1.0 + wc);
            out[idx as usize] += gain * window * sign * s / (PI * x);
        }
        (ws, wc) = (ws * rot_c + wc * rot_s, wc * rot_c - ws * rot_s);
    }
}

/// Image-source room impulse response of `length` samples from `source` to
/// `mic`. Each image contributes `beta^order / (4 pi d)` at delay `d / c`;
/// images too far away to land inside the response are skipped.
pub fn image_source_rir(
    room: &RoomSpec,
    source: Point3,
    mic: Point3,
    sample_rate: u32,
    max_order: usize,
    length: usize,
) -> Result<Vec<f64>> {
    if !room.contains(source) || !room.contains(mic) {
        return Err(Error::invalid("source and microphone must lie inside the room"));
    }
    if distance(source, mic) < 1e-6 {
        return Err(Error::invalid("source and microphone coincide"));
    }
    let fs = sample_rate as f64;
    let beta = room.reflection();
    let radius = SPEED_OF_SOUND * (length as f64 + SINC_TAPS as f64) / fs;
    let reach = [0, 1, 2].map(|k| {
        let cells = ((radius + (source[k] - mic[k]).abs()) / (2.0 * room.dims[k])).ceil() as i64 + 1;
        cells.min(max_order.min(1 << 20) as i64)
    });
    let mut out = vec![0.0; length];
    for_each_image(room, source, max_order, reach, |img| {
        let d = distance(img.position, mic);
        if d > radius {
            return;
        }
        let gain = if img.order == 0 { 1.0 } else { beta.powi(img.order as i32) };
        if gain != 0.0 {
            add_fractional_impulse(&mut out, d / SPEED_OF_SOUND * fs, gain / (4.0 * PI * d));
        }
    });
    Ok(out)
}

/// Removes the DC build-up of the all-positive image sum with the
/// Allen-Berkley second-order high-pass (cut-off 100 Hz), in place.
pub fn highpass_rir(rir: &mut [f64], sample_rate: u32) {
    let w = 2.0 * PI * 100.0 / sample_rate as f64;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y1, mut y2) = (0.0, 0.0);
    for h in rir.iter_mut() {
        let y0 = b1 * y1 + b2 * y2 + *h;
        *h = y0 + a1 * y1 + r1 * y2;
        y2 = y1;
        y1 = y0;
    }
}

/// Room response as used for mixing: the image-source response followed
/// by [`highpass_rir`].
pub fn room_rir(
    room: &RoomSpec,
    source: Point3,
    mic: Point3,
    sample_rate: u32,
    max_order: usize,
    length: usize,
) -> Result<Vec<f64>> {
    let mut rir = image_source_rir(room, source, mic, sample_rate, max_order, length)?;
    highpass_rir(&mut rir, sample_rate);
    Ok(rir)
}

/// Schroeder backward-integrated energy decay curve in dB (0 dB at t = 0).
pub fn schroeder_curve(rir: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut energy: Vec<f64> = rir
        .iter()
        .rev()
        .map(|x| {
            acc += x * x;
            acc
        })
        .collect();
    energy.reverse();
    let total = energy.first().copied().unwrap_or(0.0);
    energy
        .iter()
        .map(|&e| if total > 0.0 && e > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
        .collect()
}

/// RT60 from a least-squares line through the decay curve between -5 and
/// -25 dB, extrapolated to 60 dB. `None` if the curve never reaches -25 dB.
pub fn estimate_rt60(rir: &[f64], sample_rate: u32) -> Option<f64> {
    let energy: Vec<f64> = rir.iter().map(|x| x * x).collect();
    rt60_from_energy(&energy, 1.0 / sample_rate as f64)
}

/// As [`estimate_rt60`], from energy samples spaced `dt` seconds apart.
pub fn rt60_from_energy(energy: &[f64], dt: f64) -> Option<f64> {
    let mut acc = 0.0;
    let mut tail: Vec<f64> = energy
        .iter()
        .rev()
        .map(|e| {
            acc += e;
            acc
        })
        .collect();
    tail.reverse();
    let total = *tail.first()?;
    if total <= 0.0 {
        return None;
    }
    let curve: Vec<f64> = tail.iter().map(|&e| 10.0 * (e / total).log10()).collect();
    fit_decay(&curve, dt)
}

/// Least-squares line through a decay curve (dB, one sample per `dt`)
/// between -5 and -25 dB, extrapolated to 60 dB.
fn fit_decay(curve: &[f64], dt: f64) -> Option<f64> {
    let start = curve.iter().position(|&v| v <= -5.0)?;
    let end = curve.iter().position(|&v| v <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    let n = (end - start + 1) as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in curve[start..=end].iter().enumerate() {
        let t = (start + i) as f64 * dt;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Absorption at which the image-source decay of a shoebox room has the
/// given RT60.
///
/// An image at distance `r` in direction `u` has undergone about
/// `r * sum_k |u_k| / L_k` reflections, so the reverberant energy at time
/// `t` is the direction average of `(1 - alpha)^(c t g(u))`. The decay time
/// scales with `1 / -ln(1 - alpha)`, so one evaluation of the curve fixes
/// alpha in closed form.
pub fn image_lattice_absorption(rt60_s: f64, dims: Point3) -> Result<f64> {
    if !(rt60_s.is_finite() && rt60_s > 0.0) {
        return Err(Error::invalid(format!("RT60 must be positive, got {rt60_s}")));
    }
    if dims.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::invalid(format!("invalid room dimensions {dims:?}")));
    }
    let unit = unit_decay_rt60(dims);
    // -ln(1 - alpha) * c * rt60 = unit
    let alpha = 1.0 - (-unit / (SPEED_OF_SOUND * rt60_s)).exp();
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("no absorption reaches RT60 {rt60_s} s in {dims:?}")));
    }
    Ok(alpha)
}

/// RT60 of the direction-averaged decay `<exp(-t g(u))>`. A bin of
/// directions with rate `g` and weight `w` adds `w exp(-t g) / g` to the
/// backward-integrated curve, so the curve is evaluated in closed form and
/// only down to the bottom of the fit range.
fn unit_decay_rt60(dims: Point3) -> f64 {
    const POLAR: usize = 64;
    const AZIMUTH: usize = 64;
    const BINS: usize = 512;
    // Octant quadrature; the integrand is symmetric in the signs of u.
    let mut samples = Vec::with_capacity(POLAR * AZIMUTH);
    for i in 0..POLAR {
        let theta = (i as f64 + 0.5) / POLAR as f64 * PI / 2.0;
        let (st, ct) = theta.sin_cos();
        for j in 0..AZIMUTH {
            let phi = (j as f64 + 0.5) / AZIMUTH as f64 * PI / 2.0;
            let (sp, cp) = phi.sin_cos();
            let g = st * cp / dims[0] + st * sp / dims[1] + ct / dims[2];
            samples.push((g, st));
        }
    }
    let g_min = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let g_max = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let width = (g_max - g_min) / BINS as f64;
    let mut hist = vec![(0.0, 0.0); BINS];
    for (g, w) in samples {
        let b = (((g - g_min) / width) as usize).min(BINS - 1);
        hist[b].0 += w * g;
        hist[b].1 += w;
    }
    let bins: Vec<(f64, f64)> = hist
        .into_iter()
        .filter(|b| b.1 > 0.0)
        .map(|(gw, w)| (gw / w, w))
        .collect();
    let g_mean = bins.iter().map(|b| b.0 * b.1).sum::<f64>() / bins.iter().map(|b| b.1).sum::<f64>();
    let dt = 0.02 / g_mean;
    let tail = |t: f64| bins.iter().map(|(g, w)| w / g * (-t * g).exp()).sum::<f64>();
    let total = tail(0.0);
    let mut curve = Vec::new();
    loop {
        let db = 10.0 * (tail(curve.len() as f64 * dt) / total).log10();
        curve.push(db);
        if db <= -25.0 {
            break;
        }
    }
    fit_decay(&curve, dt).expect("decay reaches -25 dB")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> RoomSpec {
        RoomSpec::with_rt60([5.0, 4.0, 3.0], 0.5, AbsorptionModel::Sabine).unwrap()
    }

    #[test]
    fn zeroth_order_is_the_source() {
        let imgs = enumerate_images(&room(), [1.0, 2.0, 1.5], 0);
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].position, [1.0, 2.0, 1.5]);
    }

    #[test]
    fn integer_delay_gives_a_single_tap() {
        let mut out = vec![0.0; 100];
        add_fractional_impulse(&mut out, 50.0, 2.0);
        for (i, v) in out.iter().enumerate() {
            let expect = if i == 50 { 2.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "{i}: {v}");
        }
    }

    #[test]
    fn fractional_impulse_peaks_near_delay() {
        let mut out = vec![0.0; 200];
        add_fractional_impulse(&mut out, 100.3, 1.0);
        let peak = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 100);
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 0.01);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let p = [1.0, 1.0, 1.0];
        assert!(image_source_rir(&room(), p, p, 16000, 2, 100).is_err());
        assert!(image_source_rir(&room(), [9.0, 1.0, 1.0], p, 16000, 2, 100).is_err());
    }

    #[test]
    fn schroeder_of_exponential_decay() {
        let fs = 16000;
        let rt60 = 0.6;
        // Amplitude decays 60 dB in energy over rt60.
        let rir: Vec<f64> = (0..fs as usize)
            .map(|n| 10f64.powf(-3.0 * n as f64 / (rt60 * fs as f64)))
            .collect();
        let est = estimate_rt60(&rir, fs).unwrap();
        assert!((est - rt60).abs() / rt60 < 0.01, "{est}");
        let curve = schroeder_curve(&rir);
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    }
}
