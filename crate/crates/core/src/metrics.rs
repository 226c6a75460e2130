//! WER, speaker error rates and speaker counting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sot::{speaker_count, SotTranscript, SC_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub op: EditOp,
    pub ref_idx: Option<usize>,
    pub hyp_idx: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<AlignedPair>,
    pub matches: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref: usize,
}

impl Alignment {
    pub fn edit_distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment with unit costs. Among optimal paths the backtrace
/// prefers match, then substitution, deletion, insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let width = m + 1;
    let mut cost = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        cost[i * width] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * width + j] + 1;
            let ins = cost[i * width + j - 1] + 1;
            cost[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut out = Alignment {
        n_ref: n,
        ..Alignment::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        let pair = if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && cost[(i - 1) * width + j - 1] == here
        {
            out.matches += 1;
            AlignedPair {
                op: EditOp::Match,
                ref_idx: Some(i - 1),
                hyp_idx: Some(j - 1),
            }
        } else if i > 0 && j > 0 && cost[(i - 1) * width + j - 1] + 1 == here {
            out.substitutions += 1;
            AlignedPair {
                op: EditOp::Sub,
                ref_idx: Some(i - 1),
                hyp_idx: Some(j - 1),
            }
        } else if i > 0 && cost[(i - 1) * width + j] + 1 == here {
            out.deletions += 1;
            AlignedPair {
                op: EditOp::Del,
                ref_idx: Some(i - 1),
                hyp_idx: None,
            }
        } else {
            out.insertions += 1;
            AlignedPair {
                op: EditOp::Ins,
                ref_idx: None,
                hyp_idx: Some(j - 1),
            }
        };
        if pair.ref_idx.is_some() {
            i -= 1;
        }
        if pair.hyp_idx.is_some() {
            j -= 1;
        }
        out.ops.push(pair);
    }
    out.ops.reverse();
    out
}

fn strip_separators<S: AsRef<str>>(tokens: &[S]) -> Vec<&str> {
    tokens.iter().map(AsRef::as_ref).filter(|t| *t != SC_TOKEN).collect()
}

/// Error count over a reference length; rates are reported in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub errors: usize,
    pub total: usize,
}

impl ErrorCount {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.errors as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: ErrorCount) {
        self.errors += other.errors;
        self.total += other.total;
    }
}

pub fn wer_counts<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<ErrorCount> {
    let r = strip_separators(reference);
    let h = strip_separators(hypothesis);
    if r.is_empty() {
        return Err(Error::invalid("WER needs a non-empty reference"));
    }
    Ok(ErrorCount {
        errors: align(&r, &h).edit_distance(),
        total: r.len(),
    })
}

/// Word error rate in percent, ignoring `<sc>` on both sides.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    Ok(wer_counts(reference, hypothesis)?.rate())
}

/// How T-SER treats words with no aligned counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerErrorConvention {
    /// Count inserted and deleted words as speaker errors.
    pub count_insertions_deletions: bool,
}

impl Default for SpeakerErrorConvention {
    fn default() -> Self {
        Self {
            count_insertions_deletions: true,
        }
    }
}

fn checked_labels(t: &SotTranscript, side: &str) -> Result<()> {
    if t.tokens.len() != t.token_speakers.len() {
        return Err(Error::shape(format!(
            "{side} has {} tokens but {} speaker labels",
            t.tokens.len(),
            t.token_speakers.len()
        )));
    }
    Ok(())
}

pub fn t_ser_counts(
    reference: &SotTranscript,
    hypothesis: &SotTranscript,
    convention: SpeakerErrorConvention,
) -> Result<ErrorCount> {
    checked_labels(reference, "reference")?;
    checked_labels(hypothesis, "hypothesis")?;
    let (r_words, r_spk) = reference.words();
    let (h_words, h_spk) = hypothesis.words();
    if r_words.is_empty() {
        return Err(Error::invalid("T-SER needs a non-empty reference"));
    }
    let alignment = align(&r_words, &h_words);
    let errors = alignment
        .ops
        .iter()
        .filter(|p| match (p.ref_idx, p.hyp_idx) {
            (Some(r), Some(h)) => r_spk[r] != h_spk[h],
            _ => convention.count_insertions_deletions,
        })
        .count();
    Ok(ErrorCount {
        errors,
        total: r_words.len(),
    })
}

/// Token-level speaker error rate in percent.
pub fn t_ser(reference: &SotTranscript, hypothesis: &SotTranscript) -> Result<f64> {
    Ok(t_ser_counts(reference, hypothesis, SpeakerErrorConvention::default())?.rate())
}

/// Most frequent label; ties go to the label seen first.
pub fn majority_speaker<S: AsRef<str>>(labels: &[S]) -> Option<&str> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(s, _)| *s == l.as_ref()) {
            Some((_, c)) => *c += 1,
            None => counts.push((l.as_ref(), 1)),
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for (s, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((s, c));
        }
    }
    best.map(|(s, _)| s)
}

fn sentence_speakers(t: &SotTranscript) -> Vec<String> {
    t.sentences()
        .iter()
        .filter_map(|s| majority_speaker(&s.speakers).map(str::to_string))
        .collect()
}

pub fn s_ser_counts(reference: &SotTranscript, hypothesis: &SotTranscript) -> Result<ErrorCount> {
    checked_labels(reference, "reference")?;
    checked_labels(hypothesis, "hypothesis")?;
    let r = sentence_speakers(reference);
    let h = sentence_speakers(hypothesis);
    let paired = r.iter().zip(&h).filter(|(a, b)| a != b).count();
    let unmatched = r.len().abs_diff(h.len());
    Ok(ErrorCount {
        errors: paired + unmatched,
        total: r.len(),
    })
}

/// Sentence-level speaker error rate in percent. Sentences are paired by
/// position; each sentence is attributed to its majority speaker.
pub fn s_ser(reference: &SotTranscript, hypothesis: &SotTranscript) -> Result<f64> {
    Ok(s_ser_counts(reference, hypothesis)?.rate())
}

pub const COUNT_CLASSES: usize = 4;

/// Reference speaker counts 1..=4 against estimated counts 1, 2, 3, 4, >4.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountingConfusion {
    /// `counts[r - 1][e - 1]`; the last column collects estimates above 4.
    pub counts: [[usize; COUNT_CLASSES + 1]; COUNT_CLASSES],
    /// Empty hypotheses per reference class (estimated count 0).
    pub empty: [usize; COUNT_CLASSES],
}

impl CountingConfusion {
    pub fn add(&mut self, reference: usize, estimated: usize) -> Result<()> {
        if !(1..=COUNT_CLASSES).contains(&reference) {
            return Err(Error::invalid(format!(
                "reference speaker count {reference} outside 1..={COUNT_CLASSES}"
            )));
        }
        let row = reference - 1;
        if estimated == 0 {
            self.empty[row] += 1;
        } else {
            self.counts[row][(estimated - 1).min(COUNT_CLASSES)] += 1;
        }
        Ok(())
    }

    pub fn row_total(&self, reference: usize) -> usize {
        self.counts[reference - 1].iter().sum::<usize>() + self.empty[reference - 1]
    }

    /// Row-normalised percentages; rows without samples stay zero.
    pub fn percentages(&self) -> [[f64; COUNT_CLASSES + 1]; COUNT_CLASSES] {
        let mut out = [[0.0; COUNT_CLASSES + 1]; COUNT_CLASSES];
        for (r, row) in out.iter_mut().enumerate() {
            let total = self.row_total(r + 1);
            if total > 0 {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = 100.0 * self.counts[r][c] as f64 / total as f64;
                }
            }
        }
        out
    }

    /// Diagonal share per reference class, `None` for empty rows.
    pub fn accuracy(&self) -> [Option<f64>; COUNT_CLASSES] {
        let pct = self.percentages();
        std::array::from_fn(|r| (self.row_total(r + 1) > 0).then(|| pct[r][r]))
    }

    fn merge(&mut self, other: &CountingConfusion) {
        for r in 0..COUNT_CLASSES {
            for c in 0..=COUNT_CLASSES {
                self.counts[r][c] += other.counts[r][c];
            }
            self.empty[r] += other.empty[r];
        }
    }
}

/// Speaker counts are read off the transcripts as `#<sc> + 1`.
pub fn speaker_counting_accuracy(
    references: &[SotTranscript],
    hypotheses: &[SotTranscript],
) -> Result<CountingConfusion> {
    if references.len() != hypotheses.len() {
        return Err(Error::shape(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut confusion = CountingConfusion::default();
    for (r, h) in references.iter().zip(hypotheses) {
        confusion.add(speaker_count(&r.tokens), speaker_count(&h.tokens))?;
    }
    Ok(confusion)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub utterances: usize,
    pub wer: f64,
    pub t_ser: f64,
    pub s_ser: f64,
    pub word_errors: ErrorCount,
    pub speaker_token_errors: ErrorCount,
    pub speaker_sentence_errors: ErrorCount,
    pub counting_confusion: CountingConfusion,
}

impl ScoreReport {
    fn push(&mut self, r: &SotTranscript, h: &SotTranscript, convention: SpeakerErrorConvention) -> Result<()> {
        self.utterances += 1;
        self.word_errors.add(wer_counts(&r.tokens, &h.tokens)?);
        self.speaker_token_errors.add(t_ser_counts(r, h, convention)?);
        self.speaker_sentence_errors.add(s_ser_counts(r, h)?);
        self.counting_confusion
            .add(speaker_count(&r.tokens), speaker_count(&h.tokens))?;
        self.refresh();
        Ok(())
    }

    fn merge(&mut self, other: &ScoreReport) {
        self.utterances += other.utterances;
        self.word_errors.add(other.word_errors);
        self.speaker_token_errors.add(other.speaker_token_errors);
        self.speaker_sentence_errors.add(other.speaker_sentence_errors);
        self.counting_confusion.merge(&other.counting_confusion);
        self.refresh();
    }

    fn refresh(&mut self) {
        self.wer = self.word_errors.rate();
        self.t_ser = self.speaker_token_errors.rate();
        self.s_ser = self.speaker_sentence_errors.rate();
    }
}

/// Corpus-level scores: error counts are pooled before dividing.
pub fn score_corpus(
    references: &[SotTranscript],
    hypotheses: &[SotTranscript],
    convention: SpeakerErrorConvention,
) -> Result<ScoreReport> {
    if references.len() != hypotheses.len() {
        return Err(Error::shape(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut report = ScoreReport::default();
    for (r, h) in references.iter().zip(hypotheses) {
        report.push(r, h, convention)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupedScores {
    /// Keyed by reference speaker count.
    pub groups: BTreeMap<usize, ScoreReport>,
    pub combined: ScoreReport,
}

/// Scores grouped by the number of reference speakers, plus the pooled total.
pub fn score_by_speaker_count(
    references: &[SotTranscript],
    hypotheses: &[SotTranscript],
    convention: SpeakerErrorConvention,
) -> Result<GroupedScores> {
    if references.len() != hypotheses.len() {
        return Err(Error::shape(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut out = GroupedScores::default();
    for (r, h) in references.iter().zip(hypotheses) {
        out.groups
            .entry(speaker_count(&r.tokens))
            .or_default()
            .push(r, h, convention)?;
    }
    for g in out.groups.values() {
        out.combined.merge(g);
    }
    Ok(out)
}
