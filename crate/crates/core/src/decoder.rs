//! Profile-conditioned ASR decoder, vocabulary handling and the joint
//! token/speaker objective.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::Array2;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::{LayerNorm, Linear};
use crate::sot::{SotTranscript, SC_TOKEN};
use crate::speaker::{embed_tokens, DecoderLayer, SpeakerProfileMatrix};

pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const SC_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const DEFAULT_SPEAKER_WEIGHT: f64 = 0.1;

const SPECIALS: [&str; 4] = [SOS_TOKEN, EOS_TOKEN, SC_TOKEN, UNK_TOKEN];

/// Word-level vocabulary with the four special tokens at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `words` in first-seen order (duplicates skipped).
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Collects every word of the given transcripts, sorted for stability.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a SotTranscript>) -> Self {
        let mut words: Vec<&str> = transcripts
            .into_iter()
            .flat_map(|t| t.tokens.iter().map(String::as_str))
            .collect();
        words.sort_unstable();
        words.dedup();
        Self::new(words)
    }

    /// Reads a token to id map; ids must be dense and the specials must sit
    /// at their reserved ids.
    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (tok, &id) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| Error::format(format!("token id {id} is not dense in a vocabulary of {}", map.len())))?;
            if slot.is_some() {
                return Err(Error::format(format!("token id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::format("vocabulary ids are not dense")))
            .collect::<Result<_>>()?;
        for (id, special) in SPECIALS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::format(format!("special token {special} must have id {id}")));
            }
        }
        let index = tokens.iter().cloned().zip(0..).collect();
        Ok(Self { tokens, index })
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.tokens.iter().cloned().zip(0..).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids checked against a vocabulary size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if vocab_size <= UNK_ID {
            return Err(Error::invalid("vocabulary must hold the special tokens"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `[sos] + tokens`, the teacher-forced decoder input.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(SOS_ID).chain(self.tokens.iter().copied()).collect()
    }

    /// `tokens + [eos]`, the prediction targets.
    pub fn targets(&self) -> Vec<usize> {
        self.tokens.iter().copied().chain(std::iter::once(EOS_ID)).collect()
    }
}

/// Transformer decoder whose input at each position is the token embedding
/// plus a projection of that position's weighted speaker profile.
#[derive(Clone, Debug)]
pub struct AsrDecoder {
    pub embedding: ParamId,
    pub profile_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNorm,
    pub output: Linear,
    pub d_model: usize,
}

impl AsrDecoder {
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
            profile_proj: Linear::new(store, init, &format!("{name}.profile_proj"), embedding_dim, d_model, false),
            layers: (0..layers)
                .map(|i| DecoderLayer::new(store, init, &format!("{name}.layer{i}"), d_model, heads, ff_dim))
                .collect(),
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), d_model),
            output: Linear::new(store, init, &format!("{name}.out"), d_model, vocab_size, true),
            d_model,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.output.out_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.profile_proj.in_dim
    }

    /// `N x V` logits; `profiles` is `N x E`, one row per input token.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], h_asr: Var, profiles: Var) -> Result<Var> {
        if g.shape(profiles) != (tokens.len(), self.embedding_dim()) {
            return Err(Error::shape(format!(
                "profiles are {:?}, expected ({}, {})",
                g.shape(profiles),
                tokens.len(),
                self.embedding_dim()
            )));
        }
        let x = embed_tokens(g, self.embedding, tokens, self.d_model)?;
        let p = self.profile_proj.forward(g, profiles);
        let mut x = g.add(x, p);
        for layer in &self.layers {
            x = layer.forward(g, x, h_asr);
        }
        let x = self.norm_out.forward(g, x);
        Ok(self.output.forward(g, x))
    }
}

/// Next-token logits. `profiles[n]` is the weighted profile fed alongside
/// `prev_tokens[n]`; the last entry belongs to the position being predicted.
pub fn decoder_step(
    store: &ParamStore,
    decoder: &AsrDecoder,
    prev_tokens: &[usize],
    h_asr: &Array2<f64>,
    profiles: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if h_asr.nrows() == 0 {
        return Err(Error::invalid("encoder output has no frames"));
    }
    if prev_tokens.is_empty() || profiles.len() != prev_tokens.len() {
        return Err(Error::shape(format!(
            "{} tokens but {} profiles",
            prev_tokens.len(),
            profiles.len()
        )));
    }
    let e = decoder.embedding_dim();
    let mut rows = Array2::zeros((profiles.len(), e));
    for (n, p) in profiles.iter().enumerate() {
        if p.len() != e {
            return Err(Error::shape(format!("profile has {} dims, expected {e}", p.len())));
        }
        rows.row_mut(n).assign(&ndarray::ArrayView1::from(p.as_slice()));
    }
    let mut g = Graph::new(store);
    let h = g.constant(h_asr.clone());
    let p = g.constant(rows);
    let logits = decoder.forward(&mut g, prev_tokens, h, p)?;
    Ok(g.value(logits).row(prev_tokens.len() - 1).to_vec())
}

/// Teacher-forcing inputs and targets for one reference transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossTargets {
    pub inputs: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Reference speaker index per target; `None` rows are left out of the
    /// speaker loss (the final `<eos>`, and `<sc>` when excluded).
    pub speakers: Vec<Option<usize>>,
}

impl LossTargets {
    pub fn from_transcript(
        transcript: &SotTranscript,
        vocab: &Vocab,
        profiles: &SpeakerProfileMatrix,
        include_sc_in_speaker_loss: bool,
    ) -> Result<Self> {
        transcript.validate()?;
        let seq = TokenSequence::new(vocab.encode(&transcript.tokens), vocab.len())?;
        let mut speakers = Vec::with_capacity(transcript.len() + 1);
        for (tok, spk) in transcript.tokens.iter().zip(&transcript.token_speakers) {
            let idx = profiles
                .index_of(spk)
                .ok_or_else(|| Error::invalid(format!("speaker `{spk}` is not enrolled")))?;
            let keep = include_sc_in_speaker_loss || tok != SC_TOKEN;
            speakers.push(keep.then_some(idx));
        }
        speakers.push(None);
        Ok(Self {
            inputs: seq.decoder_input(),
            tokens: seq.targets(),
            speakers,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossReport {
    pub asr_loss: f64,
    pub speaker_loss: f64,
    pub total: f64,
    pub speaker_weight: f64,
}

impl JointLossReport {
    pub fn new(asr_loss: f64, speaker_loss: f64, speaker_weight: f64) -> Self {
        Self {
            asr_loss,
            speaker_loss,
            total: asr_loss + speaker_weight * speaker_loss,
            speaker_weight,
        }
    }
}

/// Mean token cross-entropy of `logits` (`N x V`) plus `speaker_weight`
/// times the mean negative log posterior (`posteriors` is `N x K`) of the
/// reference speakers.
pub fn joint_loss(
    logits: &Array2<f64>,
    posteriors: &Array2<f64>,
    targets: &LossTargets,
    speaker_weight: f64,
) -> Result<JointLossReport> {
    let n = targets.len();
    if logits.nrows() != n || posteriors.nrows() != n || targets.speakers.len() != n {
        return Err(Error::shape(format!(
            "{} logit rows and {} posterior rows for {n} targets",
            logits.nrows(),
            posteriors.nrows()
        )));
    }
    let mut asr = 0.0;
    for (row, &t) in logits.outer_iter().zip(&targets.tokens) {
        if t >= row.len() {
            return Err(Error::invalid(format!("target {t} outside {} logits", row.len())));
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        asr += lse - row[t];
    }
    let asr = if n == 0 { 0.0 } else { asr / n as f64 };
    let mut spk = 0.0;
    let mut counted = 0usize;
    for (row, s) in posteriors.outer_iter().zip(&targets.speakers) {
        if let Some(k) = *s {
            let p = *row
                .get(k)
                .ok_or_else(|| Error::invalid(format!("speaker target {k} outside {} posteriors", row.len())))?;
            spk -= p.ln();
            counted += 1;
        }
    }
    let spk = if counted == 0 { 0.0 } else { spk / counted as f64 };
    Ok(JointLossReport::new(asr, spk, speaker_weight))
}

/// Graph version of the speaker branch: posteriors `softmax(Q S)` and the
/// weighted profiles `P S^T` for a block of queries `Q` (`N x E`).
pub fn speaker_branch(g: &mut Graph, queries: Var, profiles: &SpeakerProfileMatrix) -> (Var, Var, Var) {
    let s = g.constant(profiles.matrix().clone());
    let st = g.constant(profiles.matrix().t().to_owned());
    let logits = g.matmul(queries, s);
    let post = g.softmax(logits);
    let weighted = g.matmul(post, st);
    (logits, post, weighted)
}

/// Cross-entropy terms of the joint objective in the graph; returns
/// `(asr, speaker, total)` nodes.
pub fn joint_loss_graph(
    g: &mut Graph,
    token_logits: Var,
    speaker_logits: Var,
    targets: &LossTargets,
    speaker_weight: f64,
) -> (Var, Var, Var) {
    let asr = g.cross_entropy(token_logits, Rc::new(targets.tokens.iter().map(|&t| Some(t)).collect()));
    let spk = g.cross_entropy(speaker_logits, Rc::new(targets.speakers.clone()));
    let weighted = g.scale(spk, speaker_weight);
    let total = g.add(asr, weighted);
    (asr, spk, total)
}
