use std::rc::Rc;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{MagPhaseFeatureTensor, MelFeatureTensor};
use crate::autograd::{Conv2dGeom, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::Linear;

/// Output planes of every convolution layer.
pub const CONV_CHANNELS: usize = 32;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mel,
    #[serde(rename = "magphase")]
    MagPhase,
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(FeatureKind::Mel),
            "magphase" => Ok(FeatureKind::MagPhase),
            other => Err(Error::invalid(format!("unknown feature kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureKind::Mel => "mel",
            FeatureKind::MagPhase => "magphase",
        })
    }
}

/// `C x T x A` subsampled convolution features.
#[derive(Clone, Debug)]
pub struct FrontendFeatures {
    pub values: Array3<f64>,
}

/// Depthwise `3x3` convolution followed by a pointwise `1x1` mix, then SiLU.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: ParamId,
    pub pointwise_bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride_time: usize,
    pub stride_freq: usize,
}

impl SeparableConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride_time: usize,
        stride_freq: usize,
    ) -> Self {
        let kk = KERNEL * KERNEL;
        Self {
            depthwise: store.insert(format!("{name}.dw"), init.fan_in((in_channels, kk), kk)),
            depthwise_bias: store.insert(format!("{name}.dw_bias"), Array2::zeros((in_channels, 1))),
            pointwise: store.insert(
                format!("{name}.pw"),
                init.fan_in((out_channels, in_channels), in_channels),
            ),
            pointwise_bias: store.insert(format!("{name}.pw_bias"), Array2::zeros((out_channels, 1))),
            in_channels,
            out_channels,
            stride_time,
            stride_freq,
        }
    }

    /// `x` is `in_channels x (H*W)`; returns the activated output and its `(H', W')`.
    pub fn forward(&self, g: &mut Graph, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let geom = Conv2dGeom {
            height,
            width,
            kernel_h: KERNEL,
            kernel_w: KERNEL,
            stride_h: self.stride_time,
            stride_w: self.stride_freq,
        };
        let k = g.param(self.depthwise);
        let y = g.depthwise_conv2d(x, k, geom);
        let b = g.param(self.depthwise_bias);
        let y = g.add_col(y, b);
        let p = g.param(self.pointwise);
        let y = g.matmul(p, y);
        let b = g.param(self.pointwise_bias);
        let y = g.add_col(y, b);
        (g.silu(y), geom.out_height(), geom.out_width())
    }
}

/// Convolution stack applied to each microphone with shared weights.
#[derive(Clone, Debug)]
pub struct ConvFrontend {
    pub kind: FeatureKind,
    pub layers: Vec<SeparableConv>,
    /// `M` for Mel input, `G` for magnitude+phase input.
    pub input_bins: usize,
}

impl ConvFrontend {
    /// Two stride-2 layers over a single log-Mel plane.
    pub fn mel(store: &mut ParamStore, init: &mut Initializer, name: &str, n_mels: usize) -> Self {
        let layers = vec![
            SeparableConv::new(store, init, &format!("{name}.conv1"), 1, CONV_CHANNELS, 2, 2),
            SeparableConv::new(store, init, &format!("{name}.conv2"), CONV_CHANNELS, CONV_CHANNELS, 2, 2),
        ];
        Self {
            kind: FeatureKind::Mel,
            layers,
            input_bins: n_mels,
        }
    }

    /// A plane-fusing layer (stride 1 in time, 2 in frequency) followed by
    /// two stride-2 layers.
    pub fn mag_phase(store: &mut ParamStore, init: &mut Initializer, name: &str, bins: usize) -> Self {
        let layers = vec![
            SeparableConv::new(store, init, &format!("{name}.conv1"), 3, CONV_CHANNELS, 1, 2),
            SeparableConv::new(store, init, &format!("{name}.conv2"), CONV_CHANNELS, CONV_CHANNELS, 2, 2),
            SeparableConv::new(store, init, &format!("{name}.conv3"), CONV_CHANNELS, CONV_CHANNELS, 2, 2),
        ];
        Self {
            kind: FeatureKind::MagPhase,
            layers,
            input_bins: bins,
        }
    }

    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: FeatureKind,
        bins: usize,
    ) -> Self {
        match kind {
            FeatureKind::Mel => Self::mel(store, init, name, bins),
            FeatureKind::MagPhase => Self::mag_phase(store, init, name, bins),
        }
    }

    /// Flattened feature size `A`.
    pub fn output_dim(&self) -> usize {
        let w = self
            .layers
            .iter()
            .fold(self.input_bins, |w, l| w.div_ceil(l.stride_freq));
        CONV_CHANNELS * w
    }

    /// Output frame count for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.layers.iter().fold(frames, |t, l| t.div_ceil(l.stride_time))
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if frames < 4 {
            return Err(Error::invalid(format!(
                "{frames} STFT frames are too few to subsample by 4"
            )));
        }
        Ok(())
    }

    /// Runs one microphone. `input` is `planes x (T*bins)`; output is `T' x A`.
    pub fn forward_channel(&self, g: &mut Graph, input: Var, frames: usize) -> Result<Var> {
        self.check_frames(frames)?;
        let planes = self.layers[0].in_channels;
        if g.shape(input) != (planes, frames * self.input_bins) {
            return Err(Error::shape(format!(
                "frontend expects {planes} x {} input, got {:?}",
                frames * self.input_bins,
                g.shape(input)
            )));
        }
        let (mut x, mut h, mut w) = (input, frames, self.input_bins);
        for layer in &self.layers {
            (x, h, w) = layer.forward(g, x, h, w);
        }
        let ch = CONV_CHANNELS;
        // [ch, h*w] -> [h, ch*w]
        let map: Vec<usize> = (0..h)
            .flat_map(|t| (0..ch).flat_map(move |c| (0..w).map(move |f| c * h * w + t * w + f)))
            .collect();
        Ok(g.permute(x, (h, ch * w), Rc::new(map)))
    }

    /// Per-microphone input planes for `features`.
    pub fn channel_inputs(&self, features: &FrontendInput) -> Result<Vec<Array2<f64>>> {
        match (self.kind, features) {
            (FeatureKind::Mel, FrontendInput::Mel(mel)) => {
                if mel.n_mels() != self.input_bins {
                    return Err(Error::shape(format!(
                        "frontend built for {} Mel bins, got {}",
                        self.input_bins,
                        mel.n_mels()
                    )));
                }
                let (_, t, m) = mel.values.dim();
                Ok(mel
                    .values
                    .outer_iter()
                    .map(|plane| {
                        Array2::from_shape_vec((1, t * m), plane.iter().cloned().collect()).expect("shape")
                    })
                    .collect())
            }
            (FeatureKind::MagPhase, FrontendInput::MagPhase(mp)) => {
                if mp.bins() != self.input_bins {
                    return Err(Error::shape(format!(
                        "frontend built for {} STFT bins, got {}",
                        self.input_bins,
                        mp.bins()
                    )));
                }
                let (_, t, _, gb) = mp.values.dim();
                Ok(mp
                    .values
                    .outer_iter()
                    .map(|chan| Array2::from_shape_fn((3, t * gb), |(p, i)| chan[[i / gb, p, i % gb]]))
                    .collect())
            }
            _ => Err(Error::invalid(format!(
                "{} frontend cannot consume {} features",
                self.kind,
                features.kind()
            ))),
        }
    }

    /// Evaluates the stack on every microphone.
    pub fn features(&self, store: &ParamStore, input: &FrontendInput) -> Result<FrontendFeatures> {
        let inputs = self.channel_inputs(input)?;
        let frames = input.frames();
        let mut out = Array3::zeros((inputs.len(), self.output_frames(frames), self.output_dim()));
        for (c, plane) in inputs.into_iter().enumerate() {
            let mut g = Graph::new(store);
            let x = g.constant(plane);
            let y = self.forward_channel(&mut g, x, frames)?;
            out.index_axis_mut(Axis(0), c).assign(g.value(y));
        }
        Ok(FrontendFeatures { values: out })
    }
}

/// Either frontend input representation.
#[derive(Clone, Debug)]
pub enum FrontendInput {
    Mel(MelFeatureTensor),
    MagPhase(MagPhaseFeatureTensor),
}

impl FrontendInput {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FrontendInput::Mel(_) => FeatureKind::Mel,
            FrontendInput::MagPhase(_) => FeatureKind::MagPhase,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            FrontendInput::Mel(m) => m.channels(),
            FrontendInput::MagPhase(m) => m.channels(),
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            FrontendInput::Mel(m) => m.frames(),
            FrontendInput::MagPhase(m) => m.frames(),
        }
    }

    pub fn bins(&self) -> usize {
        match self {
            FrontendInput::Mel(m) => m.n_mels(),
            FrontendInput::MagPhase(m) => m.bins(),
        }
    }

    /// Keeps the first `n` microphones.
    pub fn take_channels(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.channels() {
            return Err(Error::invalid(format!(
                "cannot take {n} of {} channels",
                self.channels()
            )));
        }
        Ok(match self {
            FrontendInput::Mel(m) => FrontendInput::Mel(MelFeatureTensor {
                values: m.values.slice(ndarray::s![..n, .., ..]).to_owned(),
            }),
            FrontendInput::MagPhase(m) => FrontendInput::MagPhase(MagPhaseFeatureTensor {
                values: m.values.slice(ndarray::s![..n, .., .., ..]).to_owned(),
            }),
        })
    }
}

/// Applies a shared `A -> D` linear layer to every channel and frame.
pub fn project_to_model_dim(
    store: &ParamStore,
    linear: &Linear,
    features: &FrontendFeatures,
) -> Result<Array3<f64>> {
    let (c, t, a) = features.values.dim();
    if a != linear.in_dim {
        return Err(Error::shape(format!(
            "projection expects A = {}, got {a}",
            linear.in_dim
        )));
    }
    let mut out = Array3::zeros((c, t, linear.out_dim));
    for (ci, plane) in features.values.outer_iter().enumerate() {
        let mut g = Graph::new(store);
        let x = g.constant(plane.to_owned());
        let y = linear.forward(&mut g, x);
        out.index_axis_mut(Axis(0), ci).assign(g.value(y));
    }
    Ok(out)
}
