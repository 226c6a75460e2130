//! Speaker side of the model: a frame-level speaker encoder stub, enrolled
//! profile matrices, the speaker decoder producing per-token queries, and
//! posterior-weighted profiles.

use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::frontend::{
    log_mel, stft, ConvFrontend, MelFeatureTensor, MultichannelWave, DEFAULT_HOP_MS, DEFAULT_WINDOW_MS,
};
use crate::init::Initializer;
use crate::nn::{causal_keys, full_keys, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// `E x K` matrix of unit-norm enrolled speaker embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfileMatrix {
    matrix: Array2<f64>,
    speaker_ids: Vec<String>,
}

impl SpeakerProfileMatrix {
    /// Wraps existing columns, which must already be unit norm.
    pub fn new(matrix: Array2<f64>, speaker_ids: Vec<String>) -> Result<Self> {
        let (e, k) = matrix.dim();
        if k == 0 || e == 0 {
            return Err(Error::invalid("profile matrix needs at least one speaker"));
        }
        if speaker_ids.len() != k {
            return Err(Error::shape(format!("{} ids for {k} profile columns", speaker_ids.len())));
        }
        for (i, col) in matrix.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "profile column {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { matrix, speaker_ids })
    }

    /// `E x K`
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn speaker_ids(&self) -> &[String] {
        &self.speaker_ids
    }

    pub fn embedding_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_speakers(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn index_of(&self, speaker: &str) -> Option<usize> {
        self.speaker_ids.iter().position(|s| s == speaker)
    }
}

/// Averages each speaker's enrollment embeddings and L2-normalises the mean.
/// Columns follow input order.
pub fn build_profile_matrix(enrollments: &[(String, Vec<Vec<f64>>)]) -> Result<SpeakerProfileMatrix> {
    if enrollments.is_empty() {
        return Err(Error::invalid("empty enrollment list"));
    }
    let dim = enrollments
        .iter()
        .flat_map(|(_, v)| v.first())
        .map(|v| v.len())
        .next()
        .ok_or_else(|| Error::invalid("no enrollment embeddings"))?;
    if dim == 0 {
        return Err(Error::invalid("zero-length enrollment embedding"));
    }
    let mut matrix = Array2::zeros((dim, enrollments.len()));
    let mut ids = Vec::with_capacity(enrollments.len());
    for (k, (id, vectors)) in enrollments.iter().enumerate() {
        if vectors.is_empty() {
            return Err(Error::invalid(format!("speaker `{id}` has no enrollment embeddings")));
        }
        if ids.contains(id) {
            return Err(Error::invalid(format!("speaker `{id}` enrolled twice")));
        }
        let mut mean = Array1::<f64>::zeros(dim);
        for v in vectors {
            if v.len() != dim {
                return Err(Error::shape(format!(
                    "speaker `{id}` embedding has {} dims, expected {dim}",
                    v.len()
                )));
            }
            mean += &Array1::from(v.clone());
        }
        mean /= vectors.len() as f64;
        let norm = mean.dot(&mean).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid(format!("speaker `{id}` has a degenerate mean embedding")));
        }
        matrix.column_mut(k).assign(&(mean / norm));
        ids.push(id.clone());
    }
    SpeakerProfileMatrix::new(matrix, ids)
}

/// Frame-level speaker embeddings `H^spk`, `T x D`.
#[derive(Clone, Debug)]
pub struct SpeakerEmbeddingSeq {
    pub values: Array2<f64>,
}

impl SpeakerEmbeddingSeq {
    /// Accepts externally computed frame-level embeddings.
    pub fn external(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    /// Errors unless the sequence runs at the encoder frame rate.
    pub fn check_frames(&self, encoder_frames: usize) -> Result<()> {
        if self.frames() != encoder_frames {
            return Err(Error::shape(format!(
                "speaker embeddings have {} frames, encoder output has {encoder_frames}",
                self.frames()
            )));
        }
        Ok(())
    }
}

/// Stand-in for a pretrained frame-level speaker network: the Mel
/// convolution stack (same time subsampling as the ASR frontend) and a
/// linear layer to the model dimension.
#[derive(Clone, Debug)]
pub struct SpeakerEncoderStub {
    pub conv: ConvFrontend,
    pub projection: Linear,
    pub n_mels: usize,
}

impl SpeakerEncoderStub {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, n_mels: usize, d_model: usize) -> Self {
        let conv = ConvFrontend::mel(store, init, &format!("{name}.conv"), n_mels);
        let projection = Linear::new(store, init, &format!("{name}.proj"), conv.output_dim(), d_model, true);
        Self {
            conv,
            projection,
            n_mels,
        }
    }

    /// `mel` is the channel-averaged `T_stft x M` log-Mel; returns `T x D`.
    pub fn forward(&self, g: &mut Graph, mel: &Array2<f64>) -> Result<Var> {
        let (t, m) = mel.dim();
        if m != self.n_mels {
            return Err(Error::shape(format!("speaker encoder expects {} Mel bins, got {m}", self.n_mels)));
        }
        let plane = Array2::from_shape_vec((1, t * m), mel.iter().cloned().collect()).expect("shape");
        let x = g.constant(plane);
        let h = self.conv.forward_channel(g, x, t)?;
        Ok(self.projection.forward(g, h))
    }
}

/// Channel-averaged log-Mel through the stub network.
pub fn speaker_encode_mel(
    store: &ParamStore,
    stub: &SpeakerEncoderStub,
    mel: &MelFeatureTensor,
) -> Result<SpeakerEmbeddingSeq> {
    let mut g = Graph::new(store);
    let y = stub.forward(&mut g, &mel.channel_mean())?;
    Ok(SpeakerEmbeddingSeq {
        values: g.value(y).clone(),
    })
}

pub fn speaker_encode(
    store: &ParamStore,
    stub: &SpeakerEncoderStub,
    wave: &MultichannelWave,
) -> Result<SpeakerEmbeddingSeq> {
    let spec = stft(wave, DEFAULT_WINDOW_MS, DEFAULT_HOP_MS)?;
    let mel = log_mel(&spec, stub.n_mels)?;
    speaker_encode_mel(store, stub, &mel)
}

/// Deterministic utterance-level embedder used in place of a pretrained
/// speaker-verification model for enrollment: a fixed random projection of
/// the mean-removed, time-averaged log-Mel spectrum.
#[derive(Clone, Debug)]
pub struct EnrollmentEmbedder {
    projection: Array2<f64>,
    n_mels: usize,
}

impl EnrollmentEmbedder {
    pub fn new(embedding_dim: usize, n_mels: usize, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        Self {
            projection: init.normal((embedding_dim, n_mels), 1.0),
            n_mels,
        }
    }

    pub fn embed(&self, wave: &MultichannelWave) -> Result<Vec<f64>> {
        let spec = stft(wave, DEFAULT_WINDOW_MS, DEFAULT_HOP_MS)?;
        let mel = log_mel(&spec, self.n_mels)?;
        let mut profile = mel.channel_mean().mean_axis(Axis(0)).expect("frames");
        let centre = profile.mean().unwrap_or(0.0);
        profile -= centre;
        let norm = profile.dot(&profile).sqrt().max(1e-12);
        profile /= norm;
        Ok(self.projection.dot(&profile).to_vec())
    }
}

/// Pre-norm Transformer decoder layer: causal self-attention,
/// cross-attention over a memory, feedforward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Self {
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), dim, heads),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), dim, heads),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), dim, ff_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Var {
        let n = g.shape(x).0;
        let m = g.shape(memory).0;
        let h = self.norm_self.forward(g, x);
        let h = self.self_attn.forward(g, h, h, causal_keys(n));
        let x = g.add(x, h);
        let h = self.norm_cross.forward(g, x);
        let h = self.cross_attn.forward(g, h, memory, full_keys(n, m));
        let x = g.add(x, h);
        let h = self.norm_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        g.add(x, h)
    }
}

/// Token embedding plus sinusoidal positions for an input prefix.
pub(crate) fn embed_tokens(g: &mut Graph, table: ParamId, tokens: &[usize], dim: usize) -> Result<Var> {
    let vocab = g.store().get(table).nrows();
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let table = g.param(table);
    let x = g.gather_rows(table, Rc::new(tokens.iter().map(|&t| Some(t)).collect()));
    let pe = g.constant(sinusoidal_positions(tokens.len(), dim));
    Ok(g.add(x, pe))
}

/// Produces the speaker query `q_n` for each decoder position. Even layers
/// cross-attend `H^asr`, odd layers `H^spk`.
#[derive(Clone, Debug)]
pub struct SpeakerDecoder {
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNorm,
    pub output: Linear,
    pub d_model: usize,
}

impl SpeakerDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        vocab_size: usize,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        layers: usize,
        embedding_dim: usize,
    ) -> Self {
        Self {
            embedding: store.insert(format!("{name}.embedding"), init.normal((vocab_size, d_model), 1.0)),
            layers: (0..layers)
                .map(|i| DecoderLayer::new(store, init, &format!("{name}.layer{i}"), d_model, heads, ff_dim))
                .collect(),
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), d_model),
            output: Linear::new(store, init, &format!("{name}.out"), d_model, embedding_dim, true),
            d_model,
        }
    }

    /// `N x E` queries; row `n` is computed from `tokens[..=n]`.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], h_asr: Var, h_spk: Var) -> Result<Var> {
        let mut x = embed_tokens(g, self.embedding, tokens, self.d_model)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let memory = if i % 2 == 0 { h_asr } else { h_spk };
            x = layer.forward(g, x, memory);
        }
        let x = self.norm_out.forward(g, x);
        Ok(self.output.forward(g, x))
    }
}

fn check_memories(h_asr: &Array2<f64>, h_spk: &Array2<f64>) -> Result<()> {
    if h_asr.nrows() == 0 {
        return Err(Error::invalid("encoder output has no frames"));
    }
    if h_asr.dim() != h_spk.dim() {
        return Err(Error::shape(format!(
            "asr embeddings are {:?} but speaker embeddings are {:?}",
            h_asr.dim(),
            h_spk.dim()
        )));
    }
    Ok(())
}

/// Query for the position following `prev_tokens` (which starts with the
/// start token).
pub fn speaker_decode(
    store: &ParamStore,
    decoder: &SpeakerDecoder,
    prev_tokens: &[usize],
    h_asr: &Array2<f64>,
    h_spk: &Array2<f64>,
) -> Result<Vec<f64>> {
    if prev_tokens.is_empty() {
        return Err(Error::invalid("speaker decoder needs at least the start token"));
    }
    check_memories(h_asr, h_spk)?;
    let mut g = Graph::new(store);
    let a = g.constant(h_asr.clone());
    let s = g.constant(h_spk.clone());
    let q = decoder.forward(&mut g, prev_tokens, a, s)?;
    Ok(g.value(q).row(prev_tokens.len() - 1).to_vec())
}

/// `softmax(S^T q)` over the enrolled speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerPosterior {
    pub probs: Vec<f64>,
    pub query: Vec<f64>,
}

impl SpeakerPosterior {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

pub fn speaker_posterior(query: &[f64], profiles: &SpeakerProfileMatrix) -> Result<SpeakerPosterior> {
    if query.len() != profiles.embedding_dim() {
        return Err(Error::shape(format!(
            "query has {} dims, profiles have {}",
            query.len(),
            profiles.embedding_dim()
        )));
    }
    let logits = profiles.matrix().t().dot(&Array1::from(query.to_vec()));
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    Ok(SpeakerPosterior {
        probs: exp.iter().map(|v| v / sum).collect(),
        query: query.to_vec(),
    })
}

/// `S * probs`, a convex combination of the profile columns.
pub fn weighted_profile(posterior: &SpeakerPosterior, profiles: &SpeakerProfileMatrix) -> Result<Vec<f64>> {
    if posterior.probs.len() != profiles.num_speakers() {
        return Err(Error::shape(format!(
            "posterior over {} speakers, profiles hold {}",
            posterior.probs.len(),
            profiles.num_speakers()
        )));
    }
    Ok(profiles
        .matrix()
        .dot(&Array1::from(posterior.probs.clone()))
        .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal(k: usize) -> SpeakerProfileMatrix {
        let m = Array2::from_shape_fn((k + 2, k), |(i, j)| if i == j { 1.0 } else { 0.0 });
        SpeakerProfileMatrix::new(m, (0..k).map(|i| format!("s{i}")).collect()).unwrap()
    }

    #[test]
    fn aligned_query_picks_its_speaker() {
        let s = orthonormal(4);
        let q: Vec<f64> = s.matrix().column(2).iter().map(|v| 10.0 * v).collect();
        assert_eq!(speaker_posterior(&q, &s).unwrap().argmax(), 2);
    }

    #[test]
    fn zero_query_is_uniform() {
        let s = orthonormal(5);
        let p = speaker_posterior(&[0.0; 7], &s).unwrap();
        assert!(p.probs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn one_hot_and_uniform_profiles() {
        let s = build_profile_matrix(&[
            ("a".into(), vec![vec![3.0, 4.0, 0.0]]),
            ("b".into(), vec![vec![0.0, 0.0, 2.0]]),
        ])
        .unwrap();
        let onehot = SpeakerPosterior {
            probs: vec![0.0, 1.0],
            query: vec![],
        };
        assert_eq!(weighted_profile(&onehot, &s).unwrap(), vec![0.0, 0.0, 1.0]);
        let uniform = SpeakerPosterior {
            probs: vec![0.5, 0.5],
            query: vec![],
        };
        let w = weighted_profile(&uniform, &s).unwrap();
        let expected = [0.3, 0.4, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn enrollment_mean_then_normalise() {
        let s = build_profile_matrix(&[("a".into(), vec![vec![1.0, 0.0], vec![0.0, 1.0]])]).unwrap();
        let h = 0.5f64.sqrt();
        assert!((s.matrix()[[0, 0]] - h).abs() < 1e-15);
        assert!((s.matrix()[[1, 0]] - h).abs() < 1e-15);
        let single = build_profile_matrix(&[("a".into(), vec![vec![0.0, -2.0]])]).unwrap();
        assert_eq!(single.matrix().column(0).to_vec(), vec![0.0, -1.0]);
    }

    #[test]
    fn enrollment_errors() {
        assert!(build_profile_matrix(&[]).is_err());
        assert!(build_profile_matrix(&[("a".into(), vec![])]).is_err());
        assert!(build_profile_matrix(&[("a".into(), vec![vec![1.0]]), ("b".into(), vec![vec![1.0, 2.0]])]).is_err());
        assert!(build_profile_matrix(&[("a".into(), vec![vec![0.0, 0.0]])]).is_err());
    }

    #[test]
    fn external_embeddings_must_match_frame_rate() {
        let seq = SpeakerEmbeddingSeq::external(Array2::zeros((10, 4)));
        assert!(seq.check_frames(10).is_ok());
        assert!(seq.check_frames(11).is_err());
    }
}
