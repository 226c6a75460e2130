use std::fs;
use std::path::{Path, PathBuf};

use mcsa_core::decoder::Vocab;
use mcsa_core::frontend::{
    log_mel, mag_phase_features, stft, FeatureKind, FrontendInput, DEFAULT_HOP_MS, DEFAULT_WINDOW_MS,
};
use mcsa_core::io::{
    load_checkpoint, load_profiles, load_vocab, read_json, read_wav, save_checkpoint, save_profiles, save_vocab,
    write_json, write_wav, FeatureFile,
};
use mcsa_core::metrics::{score_by_speaker_count, GroupedScores, ScoreReport, COUNT_CLASSES};
use mcsa_core::model::{ModelInput, SaAsrModel, SpeakerInput};
use mcsa_core::segment::{dataset_stats, read_word_annotations, segment_meeting, UtteranceGroup, WordAnnotation};
use mcsa_core::simulate::{simulate_mixture, SpeakerPool, TOY_LEXICON};
use mcsa_core::sot::{SotTranscript, TranscriptFile};
use mcsa_core::speaker::EnrollmentEmbedder;
use mcsa_core::train::{train as train_model, TrainingExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::Overrides;

/// File layout of a simulated dataset directory.
struct Dataset {
    root: PathBuf,
}

impl Dataset {
    fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    fn features_config(&self) -> PathBuf {
        self.root.join("features").join("config.json")
    }
    fn index(&self) -> PathBuf {
        self.root.join("index.json")
    }
    fn pool(&self) -> PathBuf {
        self.root.join("pool.json")
    }
    fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    fn profiles(&self) -> PathBuf {
        self.root.join("profiles.safetensors")
    }
    fn wav(&self, id: &str) -> PathBuf {
        self.root.join("wav").join(format!("{id}.wav"))
    }
    fn manifest(&self, id: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{id}.json"))
    }
    fn transcript(&self, id: &str) -> PathBuf {
        self.root.join("transcripts").join(format!("{id}.json"))
    }
    fn features(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.safetensors"))
    }

    fn ids(&self) -> Result<Vec<String>, CliError> {
        data(read_json(&self.index()), "dataset index")
    }
}

/// Errors while reading stored artefacts are data errors, whatever their kind.
fn data<T>(r: mcsa_core::Result<T>, what: &str) -> Result<T, CliError> {
    r.map_err(|e| CliError::Data(format!("{what}: {e}")))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

/// `--config`, else the first stored config that exists, else defaults; then
/// flag overrides.
fn resolve_config(o: &Overrides, stored: &[PathBuf]) -> Result<PipelineConfig, CliError> {
    let mut cfg = match (&o.config, stored.iter().find(|p| p.exists())) {
        (Some(p), _) => PipelineConfig::load(p)?,
        (None, Some(p)) => PipelineConfig::load(p)?,
        (None, None) => PipelineConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(c) = o.channels {
        cfg.channels = c;
    }
    if let Some(f) = o.features {
        cfg.features = f;
    }
    Ok(cfg)
}

pub fn simulate(o: &Overrides, out: &Path, n: Option<usize>, mics: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve_config(o, &[])?;
    if let Some(n) = n {
        cfg.n_mixtures = n;
    }
    if let Some(m) = mics {
        cfg.simulation.n_mics = m;
        cfg.channels = cfg.channels.min(m);
    }
    cfg.validate()?;
    let ds = Dataset::new(out);
    for sub in ["wav", "manifests", "transcripts"] {
        create_dir(&out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool_seed: u64 = rng.random();
    let pool = SpeakerPool::new(&cfg.simulation, pool_seed);
    let embedder = EnrollmentEmbedder::new(cfg.model.embedding_dim, cfg.model.n_mels, pool_seed);
    let profiles = pool.profiles(&cfg.simulation.synth, &embedder)?;

    let mut ids = Vec::with_capacity(cfg.n_mixtures);
    for i in 0..cfg.n_mixtures {
        let id = format!("mix{i:05}");
        let seed: u64 = rng.random();
        let mix = simulate_mixture(&cfg.simulation, &pool, &id, seed)?;
        write_wav(&ds.wav(&id), &mix.wave)?;
        write_json(&ds.manifest(&id), &mix.manifest)?;
        write_json(&ds.transcript(&id), &TranscriptFile::from_utterances(mix.manifest.utterances.clone())?)?;
        eprintln!(
            "{id}: {} speaker(s), {:.2} s, rt60 {:.2} s",
            mix.manifest.n_speakers,
            mix.wave.duration_s(),
            mix.manifest.room.rt60_s
        );
        ids.push(id);
    }
    write_json(&ds.pool(), &pool)?;
    save_vocab(&ds.vocab(), &Vocab::new(TOY_LEXICON))?;
    save_profiles(&ds.profiles(), &profiles)?;
    write_json(&ds.index(), &ids)?;
    write_json(&ds.config(), &cfg)?;
    println!("simulated {} mixtures into {}", ids.len(), out.display());
    Ok(())
}

fn featurize_wave(cfg: &PipelineConfig, path: &Path) -> Result<FeatureFile, CliError> {
    let wave = data(read_wav(path), &path.display().to_string())?;
    if cfg.channels > wave.channels() {
        return Err(CliError::Validation(format!(
            "{} channels requested but {} has {}",
            cfg.channels,
            path.display(),
            wave.channels()
        )));
    }
    let wave = wave.take_channels(cfg.channels)?;
    let spec = stft(&wave, DEFAULT_WINDOW_MS, DEFAULT_HOP_MS)?;
    let speaker_mel = log_mel(&spec, cfg.model.n_mels)?.channel_mean();
    let features = match cfg.features {
        FeatureKind::Mel => FrontendInput::Mel(log_mel(&spec, cfg.model.n_mels)?),
        FeatureKind::MagPhase => FrontendInput::MagPhase(mag_phase_features(&spec)),
    };
    Ok(FeatureFile { features, speaker_mel })
}

pub fn featurize(o: &Overrides, root: &Path) -> Result<(), CliError> {
    let ds = Dataset::new(root);
    let cfg = resolve_config(o, &[ds.config()])?;
    cfg.validate()?;
    create_dir(&root.join("features"))?;
    let ids = ds.ids()?;
    for id in &ids {
        let f = featurize_wave(&cfg, &ds.wav(id))?;
        let mut bundle = f.to_bundle()?;
        bundle.set_meta_json("config", &cfg)?;
        bundle.save(&ds.features(id))?;
    }
    write_json(&ds.features_config(), &cfg)?;
    println!(
        "featurized {} mixtures ({}, {} channel(s))",
        ids.len(),
        cfg.features,
        cfg.channels
    );
    Ok(())
}

fn model_input(cfg_channels: usize, f: FeatureFile) -> Result<ModelInput, CliError> {
    if f.features.channels() < cfg_channels {
        return Err(CliError::Validation(format!(
            "model expects {cfg_channels} channels, features have {}",
            f.features.channels()
        )));
    }
    Ok(ModelInput {
        features: f.features,
        speaker: SpeakerInput::Mel(f.speaker_mel),
    })
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    asr_loss: f64,
    speaker_loss: f64,
    total: f64,
}

pub fn train(o: &Overrides, root: &Path, out: &Path, steps: Option<usize>) -> Result<(), CliError> {
    let ds = Dataset::new(root);
    let mut cfg = resolve_config(o, &[ds.features_config(), ds.config()])?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let vocab = data(load_vocab(&ds.vocab()), "vocabulary")?;
    let profiles = data(load_profiles(&ds.profiles()), "profiles")?;
    let model_cfg = cfg.model_config(vocab.len())?;
    let mut model = SaAsrModel::new(model_cfg)?;
    let mut examples = Vec::new();
    for id in ds.ids()? {
        let f = data(FeatureFile::load(&ds.features(&id)), &id)?;
        if f.features.kind() != cfg.features {
            return Err(CliError::Validation(format!(
                "{id}: features are {}, config asks for {}",
                f.features.kind(),
                cfg.features
            )));
        }
        let transcript = load_transcript(&ds.transcript(&id))?;
        let targets = data(model.targets(&transcript, &vocab, &profiles), &id)?;
        examples.push(TrainingExample {
            input: model_input(cfg.channels, f)?,
            targets,
        });
    }
    create_dir(out)?;
    let curve = train_model(&mut model, &examples, &profiles, &cfg.train, |step, r| {
        if step % 10 == 0 {
            eprintln!("step {step:5}: asr {:.4} spk {:.4} total {:.4}", r.asr_loss, r.speaker_loss, r.total);
        }
    })?;
    let mut w = csv::Writer::from_path(out.join("loss.csv"))?;
    for (step, r) in curve.iter().enumerate() {
        w.serialize(LossRow {
            step,
            asr_loss: r.asr_loss,
            speaker_loss: r.speaker_loss,
            total: r.total,
        })?;
    }
    w.flush()?;
    save_checkpoint(&out.join("checkpoint.safetensors"), &model, &vocab)?;
    write_json(&out.join("config.json"), &cfg)?;
    let first = curve.first().map_or(f64::NAN, |r| r.total);
    let last = curve.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} steps on {} mixtures: loss {first:.4} -> {last:.4} (speaker weight {})",
        curve.len(),
        examples.len(),
        cfg.model.speaker_weight
    );
    Ok(())
}

fn load_transcript(path: &Path) -> Result<SotTranscript, CliError> {
    let file: TranscriptFile = data(read_json(path), &path.display().to_string())?;
    data(file.transcript(), &path.display().to_string())
}

pub fn decode(o: &Overrides, root: &Path, model_dir: &Path, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::new(root);
    let cfg = resolve_config(o, &[model_dir.join("config.json"), ds.features_config(), ds.config()])?;
    let (model, vocab) = data(load_checkpoint(&model_dir.join("checkpoint.safetensors")), "checkpoint")?;
    let profiles = data(load_profiles(&ds.profiles()), "profiles")?;
    create_dir(out)?;
    let ids = ds.ids()?;
    for id in &ids {
        let f = data(FeatureFile::load(&ds.features(id)), id)?;
        let input = model_input(model.config.channels, f)?;
        let hyp = model.transcribe(&input, &profiles, &vocab, cfg.decode_max_len)?;
        write_json(&out.join(format!("{id}.json")), &TranscriptFile::from(hyp))?;
    }
    println!("decoded {} mixtures into {}", ids.len(), out.display());
    Ok(())
}

fn transcript_ids(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "json") && p.file_stem().is_some_and(|s| s != "config"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    Ok(ids)
}

#[derive(Serialize)]
struct ScoreOutput<'a> {
    config: &'a PipelineConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<&'a std::collections::BTreeMap<usize, ScoreReport>>,
    combined: &'a ScoreReport,
}

fn score_line(label: &str, r: &ScoreReport) -> String {
    format!(
        "{label:<10} {:>6} {:>8.2} {:>8.2} {:>8.2}",
        r.utterances, r.wer, r.s_ser, r.t_ser
    )
}

pub fn score(
    o: &Overrides,
    reference: &Path,
    hyp: &Path,
    per_speaker_count: bool,
    json: Option<&Path>,
    csv_path: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = resolve_config(o, &[])?;
    let ids = transcript_ids(reference)?;
    if ids.is_empty() {
        return Err(CliError::Data(format!("no reference transcripts in {}", reference.display())));
    }
    let mut refs = Vec::with_capacity(ids.len());
    let mut hyps = Vec::with_capacity(ids.len());
    for id in &ids {
        refs.push(load_transcript(&reference.join(format!("{id}.json")))?);
        let h = hyp.join(format!("{id}.json"));
        if !h.exists() {
            return Err(CliError::Data(format!("missing hypothesis {}", h.display())));
        }
        let file: TranscriptFile = data(read_json(&h), &h.display().to_string())?;
        let t = data(
            SotTranscript::new(file.tokens, file.speakers),
            &h.display().to_string(),
        )?;
        hyps.push(t);
    }
    let scores: GroupedScores = data(score_by_speaker_count(&refs, &hyps, cfg.scoring), "scoring")?;
    println!("{:<10} {:>6} {:>8} {:>8} {:>8}", "speakers", "utts", "WER", "S-SER", "T-SER");
    if per_speaker_count {
        for (k, r) in &scores.groups {
            println!("{}", score_line(&k.to_string(), r));
        }
    }
    println!("{}", score_line("all", &scores.combined));
    let conf = &scores.combined.counting_confusion;
    let acc = conf.accuracy();
    let acc_text: Vec<String> = (0..COUNT_CLASSES)
        .map(|r| match acc[r] {
            Some(a) => format!("{}:{a:.1}%", r + 1),
            None => format!("{}:-", r + 1),
        })
        .collect();
    println!("speaker counting accuracy {}", acc_text.join(" "));
    if let Some(p) = json {
        write_json(
            p,
            &ScoreOutput {
                config: &cfg,
                groups: per_speaker_count.then_some(&scores.groups),
                combined: &scores.combined,
            },
        )?;
    }
    if let Some(p) = csv_path {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["ref_speakers", "est_1", "est_2", "est_3", "est_4", "est_gt4", "empty", "accuracy"])?;
        let pct = conf.percentages();
        for r in 0..COUNT_CLASSES {
            let total = conf.row_total(r + 1);
            let empty = if total > 0 {
                100.0 * conf.empty[r] as f64 / total as f64
            } else {
                0.0
            };
            let mut rec = vec![(r + 1).to_string()];
            rec.extend(pct[r].iter().map(|v| format!("{v:.2}")));
            rec.push(format!("{empty:.2}"));
            rec.push(acc[r].map_or(String::new(), |a| format!("{a:.2}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// One utterance group with its serialized transcript.
#[derive(Serialize, Deserialize)]
struct GroupRecord {
    id: String,
    #[serde(flatten)]
    group: UtteranceGroup,
    /// Absent when two speakers start at the same instant.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    transcript: Option<TranscriptFile>,
}

#[derive(Serialize, Deserialize)]
struct GroupManifest {
    config: PipelineConfig,
    groups: Vec<GroupRecord>,
}

pub fn segment(
    o: &Overrides,
    words_path: &Path,
    out: &Path,
    chunk: Option<f64>,
    hop: Option<f64>,
) -> Result<(), CliError> {
    let mut cfg = resolve_config(o, &[])?;
    if let Some(c) = chunk {
        cfg.segmentation.chunk_s = c;
    }
    if let Some(h) = hop {
        cfg.segmentation.hop_s = h;
    }
    cfg.segmentation.validate()?;
    let file = fs::File::open(words_path).map_err(|e| CliError::Data(format!("{}: {e}", words_path.display())))?;
    let words: Vec<WordAnnotation> = data(
        read_word_annotations(std::io::BufReader::new(file)),
        &words_path.display().to_string(),
    )?;
    if words.is_empty() {
        return Err(CliError::Data(format!("{} has no words", words_path.display())));
    }
    let groups = segment_meeting(&words, &cfg.segmentation)?;
    let stats = dataset_stats(&groups);
    let records = groups
        .into_iter()
        .enumerate()
        .map(|(i, group)| {
            let transcript = group.transcript_file().ok();
            GroupRecord {
                id: format!("seg{i:05}"),
                group,
                transcript,
            }
        })
        .collect();
    write_json(out, &GroupManifest { config: cfg, groups: records })?;
    print!("{}", stats.to_table());
    Ok(())
}

pub fn stats(groups_path: &Path, json: Option<&Path>) -> Result<(), CliError> {
    let manifest: GroupManifest = data(read_json(groups_path), &groups_path.display().to_string())?;
    let groups: Vec<UtteranceGroup> = manifest.groups.into_iter().map(|r| r.group).collect();
    let stats = dataset_stats(&groups);
    print!("{}", stats.to_table());
    if let Some(p) = json {
        write_json(p, &stats)?;
    }
    Ok(())
}
