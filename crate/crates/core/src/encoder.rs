//! Multichannel Conformer encoder with multi-frame cross-channel attention
//! (MFCCA) and convolution fusion across microphones.
//!
//! Internally a `T x C x D` tensor is carried as `(T*C) x D` rows, row
//! `t*C + c` holding channel `c` at frame `t`.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{ChannelConvGeom, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::{sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// Largest microphone count the fusion layer supports.
pub const MAX_CHANNELS: usize = 4;
const FUSION_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccaConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Context frames `F` on each side of the current frame.
    pub context_frames: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    /// Depthwise kernel of the Conformer convolution module (odd).
    pub conv_kernel: usize,
}

impl Default for MfccaConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            context_frames: 2,
            num_layers: 12,
            ff_dim: 2048,
            conv_kernel: 15,
        }
    }
}

impl MfccaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.num_layers == 0 || self.ff_dim == 0 {
            return Err(Error::invalid("encoder needs at least one layer and a non-empty feedforward"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::invalid("conformer conv kernel must be odd"));
        }
        Ok(())
    }

    /// Width `(2F+1)*C` of the key/value axis.
    pub fn context_width(&self, channels: usize) -> usize {
        (2 * self.context_frames + 1) * channels
    }
}

/// `T x (2F+1)C x D` context-expanded frames.
#[derive(Clone, Debug)]
pub struct ContextExpandedInput {
    pub values: Array3<f64>,
}

/// Gathers frames `t-F ..= t+F` of all channels at every step; frames
/// outside the sequence are zeros. Input is `T x C x D`.
pub fn context_expand(x: &Array3<f64>, context_frames: usize) -> ContextExpandedInput {
    let (t, c, d) = x.dim();
    let rows = context_rows(t, c, context_frames);
    let width = (2 * context_frames + 1) * c;
    let mut values = Array3::zeros((t, width, d));
    for ti in 0..t {
        for j in 0..width {
            if let Some(r) = rows[ti * width + j] {
                values
                    .slice_mut(ndarray::s![ti, j, ..])
                    .assign(&x.slice(ndarray::s![r / c, r % c, ..]));
            }
        }
    }
    ContextExpandedInput { values }
}

/// Row indices into a time-major `(T*C)` tensor that realise
/// [`context_expand`]: entry `t*W + f*C + c` maps to frame `t + f - F`.
pub fn context_rows(frames: usize, channels: usize, context_frames: usize) -> Vec<Option<usize>> {
    let span = 2 * context_frames + 1;
    let mut rows = Vec::with_capacity(frames * span * channels);
    for t in 0..frames {
        for f in 0..span {
            let src = t as isize + f as isize - context_frames as isize;
            for c in 0..channels {
                rows.push((src >= 0 && src < frames as isize).then(|| src as usize * channels + c));
            }
        }
    }
    rows
}

/// Stacks `C x T x D` into time-major `(T*C) x D`.
pub fn to_time_major(x: &Array3<f64>) -> Array2<f64> {
    let (c, t, d) = x.dim();
    Array2::from_shape_fn((t * c, d), |(r, k)| x[[r % c, r / c, k]])
}

/// Inverse of [`to_time_major`].
pub fn from_time_major(x: &Array2<f64>, channels: usize) -> Array3<f64> {
    let (rows, d) = x.dim();
    let t = rows / channels;
    Array3::from_shape_fn((channels, t, d), |(c, ti, k)| x[[ti * channels + c, k]])
}

/// Interleaves per-channel `T x D` nodes into one time-major node.
pub fn interleave_channels(g: &mut Graph, channels: &[Var]) -> Var {
    let (t, d) = g.shape(channels[0]);
    let c = channels.len();
    let stacked = g.concat_rows(channels);
    let map: Vec<usize> = (0..t * c)
        .flat_map(|r| {
            let (ti, ci) = (r / c, r % c);
            (0..d).map(move |k| (ci * t + ti) * d + k)
        })
        .collect();
    g.permute(stacked, (t * c, d), Rc::new(map))
}

/// Multi-frame cross-channel attention: queries from each `(t, c)`, keys
/// and values from the `(2F+1)*C` context-expanded frames around `t`.
#[derive(Clone, Debug)]
pub struct MfccaAttention {
    pub attn: MultiHeadAttention,
    pub context_frames: usize,
}

impl MfccaAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        context_frames: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, init, name, dim, heads),
            context_frames,
        }
    }

    pub fn key_sets(&self, frames: usize, channels: usize) -> Rc<Vec<Vec<usize>>> {
        let width = (2 * self.context_frames + 1) * channels;
        Rc::new(
            (0..frames * channels)
                .map(|r| {
                    let t = r / channels;
                    (t * width..(t + 1) * width).collect()
                })
                .collect(),
        )
    }

    /// Returns the output and the attention node (for inspecting weights).
    pub fn forward_with_attention(&self, g: &mut Graph, x: Var, frames: usize, channels: usize) -> (Var, Var) {
        let expanded = g.gather_rows(x, Rc::new(context_rows(frames, channels, self.context_frames)));
        let q = self.attn.query.forward(g, x);
        let k = self.attn.key.forward(g, expanded);
        let v = self.attn.value.forward(g, expanded);
        let h = g.attention(q, k, v, self.attn.heads, self.attn.scale(), self.key_sets(frames, channels));
        (self.attn.output.forward(g, h), h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, frames: usize, channels: usize) -> Var {
        self.forward_with_attention(g, x, frames, channels).0
    }
}

/// Attention weights per `(t, c, head)`, each over the `(2F+1)*C` keys.
pub type MfccaWeights = Vec<Vec<f64>>;

/// Evaluates MFCCA on a `T x C x D` tensor.
pub fn mfcca_attention(
    store: &ParamStore,
    layer: &MfccaAttention,
    x: &Array3<f64>,
) -> Result<(Array3<f64>, MfccaWeights)> {
    let (t, c, d) = x.dim();
    if d != layer.attn.query.in_dim {
        return Err(Error::shape(format!(
            "MFCCA expects D = {}, got {d}",
            layer.attn.query.in_dim
        )));
    }
    if t == 0 || c == 0 {
        return Err(Error::shape("MFCCA needs at least one frame and channel"));
    }
    let mut g = Graph::new(store);
    let rows = Array2::from_shape_vec((t * c, d), x.iter().cloned().collect()).expect("shape");
    let xv = g.constant(rows);
    let (out, attn) = layer.forward_with_attention(&mut g, xv, t, c);
    let weights = g.attention_weights(attn).expect("attention node");
    let out = g.value(out).clone().into_shape_with_order((t, c, d)).expect("shape");
    Ok((out, weights))
}

/// Pointwise-GLU, depthwise time convolution, norm, SiLU, pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, kernel: usize) -> Self {
        Self {
            pointwise_in: Linear::new(store, init, &format!("{name}.pw_in"), dim, 2 * dim, true),
            depthwise: store.insert(format!("{name}.dw"), init.fan_in((kernel, dim), kernel)),
            depthwise_bias: store.insert(format!("{name}.dw_bias"), Array2::zeros((1, dim))),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            pointwise_out: Linear::new(store, init, &format!("{name}.pw_out"), dim, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, frames: usize, channels: usize) -> Var {
        let h = self.pointwise_in.forward(g, x);
        let h = g.glu(h);
        let k = g.param(self.depthwise);
        let h = g.depthwise_time_conv(h, k, frames, channels);
        let b = g.param(self.depthwise_bias);
        let h = g.add_row(h, b);
        let h = self.norm.forward(g, h);
        let h = g.silu(h);
        self.pointwise_out.forward(g, h)
    }
}

/// Conformer block whose leading feedforward is replaced by MFCCA.
///
/// Pre-norm residual order: MFCCA, per-channel time self-attention,
/// convolution module, half-step feedforward, final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerMfccaBlock {
    pub norm_mfcca: LayerNorm,
    pub mfcca: MfccaAttention,
    pub norm_mhsa: LayerNorm,
    pub mhsa: MultiHeadAttention,
    pub norm_conv: LayerNorm,
    pub conv: ConvModule,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub norm_out: LayerNorm,
}

impl ConformerMfccaBlock {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &MfccaConfig) -> Self {
        let d = cfg.d_model;
        Self {
            norm_mfcca: LayerNorm::new(store, &format!("{name}.norm_mfcca"), d),
            mfcca: MfccaAttention::new(store, init, &format!("{name}.mfcca"), d, cfg.heads, cfg.context_frames),
            norm_mhsa: LayerNorm::new(store, &format!("{name}.norm_mhsa"), d),
            mhsa: MultiHeadAttention::new(store, init, &format!("{name}.mhsa"), d, cfg.heads),
            norm_conv: LayerNorm::new(store, &format!("{name}.norm_conv"), d),
            conv: ConvModule::new(store, init, &format!("{name}.conv"), d, cfg.conv_kernel),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d, cfg.ff_dim),
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), d),
        }
    }

    /// Query `(t, c)` sees every frame of channel `c`.
    pub fn time_keys(frames: usize, channels: usize) -> Rc<Vec<Vec<usize>>> {
        Rc::new(
            (0..frames * channels)
                .map(|r| {
                    let c = r % channels;
                    (0..frames).map(|t| t * channels + c).collect()
                })
                .collect(),
        )
    }

    pub fn forward(&self, g: &mut Graph, x: Var, frames: usize, channels: usize) -> Var {
        let h = self.norm_mfcca.forward(g, x);
        let h = self.mfcca.forward(g, h, frames, channels);
        let x = g.add(x, h);

        let h = self.norm_mhsa.forward(g, x);
        let h = self.mhsa.forward(g, h, h, Self::time_keys(frames, channels));
        let x = g.add(x, h);

        let h = self.norm_conv.forward(g, x);
        let h = self.conv.forward(g, h, frames, channels);
        let x = g.add(x, h);

        let h = self.norm_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);

        self.norm_out.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct FusionStage {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Learned convolution collapsing `C` encoder streams into one:
/// `2->1`, `3->2->1`, `4->2->1`; a single stream passes through.
#[derive(Clone, Debug)]
pub struct ChannelFusion {
    pub channels: usize,
    pub stages: Vec<FusionStage>,
}

impl ChannelFusion {
    /// Channel counts visited for `channels` inputs.
    pub fn plan(channels: usize) -> Result<Vec<usize>> {
        match channels {
            1 => Ok(vec![1]),
            2 => Ok(vec![2, 1]),
            3 => Ok(vec![3, 2, 1]),
            4 => Ok(vec![4, 2, 1]),
            0 => Err(Error::invalid("fusion needs at least one channel")),
            c => Err(Error::invalid(format!(
                "fusion supports at most {MAX_CHANNELS} channels, got {c}"
            ))),
        }
    }

    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        let plan = Self::plan(channels)?;
        let k = FUSION_KERNEL * FUSION_KERNEL;
        let stages = plan
            .windows(2)
            .enumerate()
            .map(|(i, w)| FusionStage {
                weight: store.insert(format!("{name}.stage{i}.weight"), init.fan_in((w[1], w[0] * k), w[0] * k)),
                bias: store.insert(format!("{name}.stage{i}.bias"), Array2::zeros((1, w[1]))),
                in_channels: w[0],
                out_channels: w[1],
            })
            .collect();
        Ok(Self { channels, stages })
    }

    /// `(T*C) x D` time-major input to `T x D`.
    pub fn forward(&self, g: &mut Graph, x: Var, frames: usize) -> Var {
        let mut h = x;
        for st in &self.stages {
            let w = g.param(st.weight);
            let b = g.param(st.bias);
            h = g.channel_conv(
                h,
                w,
                b,
                ChannelConvGeom {
                    frames,
                    in_channels: st.in_channels,
                    out_channels: st.out_channels,
                    kernel_t: FUSION_KERNEL,
                    kernel_d: FUSION_KERNEL,
                },
            );
        }
        h
    }
}

/// Fuses a `C x T x D` tensor into `T x D`.
pub fn channel_conv_fusion(store: &ParamStore, fusion: &ChannelFusion, x: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, t, _) = x.dim();
    ChannelFusion::plan(c)?;
    if c != fusion.channels {
        return Err(Error::shape(format!(
            "fusion built for {} channels, got {c}",
            fusion.channels
        )));
    }
    let mut g = Graph::new(store);
    let xv = g.constant(to_time_major(x));
    let y = fusion.forward(&mut g, xv, t);
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `C x T x D` after the last block.
    pub per_channel: Array3<f64>,
    /// `T x D`, the ASR embedding.
    pub fused: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct MfccaEncoder {
    pub config: MfccaConfig,
    pub channels: usize,
    pub blocks: Vec<ConformerMfccaBlock>,
    pub fusion: ChannelFusion,
}

impl MfccaEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        config: &MfccaConfig,
        channels: usize,
    ) -> Result<Self> {
        config.validate()?;
        let fusion = ChannelFusion::new(store, init, &format!("{name}.fusion"), channels)?;
        let blocks = (0..config.num_layers)
            .map(|i| ConformerMfccaBlock::new(store, init, &format!("{name}.block{i}"), config))
            .collect();
        Ok(Self {
            config: config.clone(),
            channels,
            blocks,
            fusion,
        })
    }

    /// Adds positional encodings to time-major `x` and runs all blocks and
    /// the fusion. Returns `(per_channel, fused)` nodes.
    pub fn forward(&self, g: &mut Graph, x: Var, frames: usize) -> (Var, Var) {
        let c = self.channels;
        let pe = sinusoidal_positions(frames, self.config.d_model);
        let pe = Array2::from_shape_fn((frames * c, self.config.d_model), |(r, k)| pe[[r / c, k]]);
        let pe = g.constant(pe);
        let mut h = g.add(x, pe);
        for block in &self.blocks {
            h = block.forward(g, h, frames, c);
        }
        let fused = self.fusion.forward(g, h, frames);
        (h, fused)
    }
}

/// Runs the encoder on `C x T x D` projected features.
pub fn encode(store: &ParamStore, encoder: &MfccaEncoder, features: &Array3<f64>) -> Result<EncoderOutput> {
    let (c, t, d) = features.dim();
    if c != encoder.channels {
        return Err(Error::shape(format!(
            "encoder built for {} channels, got {c}",
            encoder.channels
        )));
    }
    if d != encoder.config.d_model {
        return Err(Error::shape(format!(
            "encoder expects D = {}, got {d}",
            encoder.config.d_model
        )));
    }
    if t == 0 {
        return Err(Error::shape("encoder input has no frames"));
    }
    let mut g = Graph::new(store);
    let x = g.constant(to_time_major(features));
    let (per, fused) = encoder.forward(&mut g, x, t);
    Ok(EncoderOutput {
        per_channel: from_time_major(g.value(per), c),
        fused: g.value(fused).clone(),
    })
}
