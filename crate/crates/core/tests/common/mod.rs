//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use mcsa_core::autograd::ParamStore;
use mcsa_core::encoder::{ChannelFusion, MfccaAttention};
use mcsa_core::nn::Linear;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fills every parameter with uniform noise so biases and norms are exercised.
pub fn randomise(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
}

pub fn random_array3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn linear(store: &ParamStore, l: &Linear, x: &Array1<f64>) -> Array1<f64> {
    let mut y = x.dot(store.get(l.weight));
    if let Some(b) = l.bias {
        y += &store.get(b).row(0);
    }
    y
}

/// MFCCA by explicit loops over `T x C x D` input: frame `(t, c)` attends to
/// every channel of frames `t-F..=t+F`, with zero vectors past the edges.
pub fn naive_mfcca(store: &ParamStore, layer: &MfccaAttention, x: &Array3<f64>) -> Array3<f64> {
    let (t, c, d) = x.dim();
    let f = layer.context_frames as isize;
    let heads = layer.attn.heads;
    let dh = d / heads;
    let row = |ti: isize, ci: usize| -> Array1<f64> {
        if ti < 0 || ti >= t as isize {
            Array1::zeros(d)
        } else {
            x.slice(ndarray::s![ti as usize, ci, ..]).to_owned()
        }
    };
    let mut out = Array3::zeros((t, c, d));
    for ti in 0..t {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for off in -f..=f {
            for cj in 0..c {
                let src = row(ti as isize + off, cj);
                keys.push(linear(store, &layer.attn.key, &src));
                values.push(linear(store, &layer.attn.value, &src));
            }
        }
        for ci in 0..c {
            let q = linear(store, &layer.attn.query, &row(ti as isize, ci));
            let mut ctx = Array1::zeros(d);
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| {
                        q.slice(ndarray::s![r.clone()]).dot(&k.slice(ndarray::s![r.clone()])) / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (s, v) in scores.iter().zip(&values) {
                    let p = (s - max).exp() / z;
                    for k in r.clone() {
                        ctx[k] += p * v[k];
                    }
                }
            }
            out.slice_mut(ndarray::s![ti, ci, ..]).assign(&linear(store, &layer.attn.output, &ctx));
        }
    }
    out
}

/// Channel fusion by explicit loops: each stage is a 3x3 convolution over
/// `(T, D)` with zero padding, mixing input channels into output channels.
pub fn naive_fusion(store: &ParamStore, fusion: &ChannelFusion, x: &Array3<f64>) -> Array2<f64> {
    let (_, t, d) = x.dim();
    let mut h = x.clone();
    for st in &fusion.stages {
        let w = store.get(st.weight);
        let b = store.get(st.bias);
        let mut next = Array3::zeros((st.out_channels, t, d));
        for o in 0..st.out_channels {
            for ti in 0..t {
                for di in 0..d {
                    let mut acc = b[[0, o]];
                    for i in 0..st.in_channels {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let (tt, dd) = (ti as isize + a as isize - 1, di as isize + bb as isize - 1);
                                if tt >= 0 && tt < t as isize && dd >= 0 && dd < d as isize {
                                    acc += w[[o, i * 9 + a * 3 + bb]] * h[[i, tt as usize, dd as usize]];
                                }
                            }
                        }
                    }
                    next[[o, ti, di]] = acc;
                }
            }
        }
        h = next;
    }
    h.index_axis(ndarray::Axis(0), 0).to_owned()
}

pub fn naive_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Exhaustive minimum over every alignment path, no memoisation.
pub fn brute_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            let diag = brute_distance(rr, hh) + usize::from(a != b);
            let del = brute_distance(rr, h) + 1;
            let ins = brute_distance(r, hh) + 1;
            diag.min(del).min(ins)
        }
    }
}

pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
