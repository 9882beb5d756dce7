//! Training loops and the staged recipe.
//!
//! Stage 1 trains the meta-learner and exports pseudo masks, stage 2 trains
//! the localizer on them, stage 3 trains the captioner with cross-entropy
//! and optionally self-critical reinforcement. Each stage writes its own
//! directory under the run directory and a `done` marker; finished stages
//! are skipped on rerun.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::captioner::{
    prepare_inputs, sample_sequence, Ablation, CaptionModel, DecoderConfig, ModelShape, VideoInputs,
};
use crate::config::{Config, ScstConfig};
use crate::corpus::{
    build_concept_classes, tokenize, ConceptClassTable, SynonymTable, Vocabulary, BOS_ID, EOS_ID,
};
use crate::datagen::{Corpus, VideoRecord};
use crate::error::{write_file, Error, Result};
use crate::localizer::{build_samples, evaluate_localization, LocalizationReport, Localizer, LocalizerSample};
use crate::metalearner::{concat_frames, sample_training_frames, ExportContext, MetaLearner, PseudoMasks};
use crate::metrics::{score_corpus, CiderScorer, ScoreReport};
use crate::params::Adam;

pub const STAGE_META: &str = "stage1_meta";
pub const STAGE_LOCALIZER: &str = "stage2_localizer";
pub const STAGE_CAPTIONER: &str = "stage3_captioner";
pub const DONE_MARKER: &str = "done";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

/// Training log kept in memory and optionally appended to a JSONL file.
#[derive(Debug, Default)]
pub struct TrainLog {
    file: Option<PathBuf>,
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn appending(path: &Path) -> Self {
        Self {
            file: Some(path.to_path_buf()),
            entries: Vec::new(),
        }
    }

    pub fn record(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(path) = &self.file {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&entry).expect("log entry serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.entries.push(entry);
        Ok(())
    }
}

fn check_finite(value: f64, stage: &str, step: usize, batch: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{stage}: loss is {value} at step {step}; batch {batch}"
        )))
    }
}

fn describe_batch<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    format!("[{}]", ids.collect::<Vec<_>>().join(", "))
}

/// Vocabulary, concept classes and the corpus's lexical resources.
#[derive(Clone, Debug)]
pub struct TextAssets {
    pub vocab: Vocabulary,
    pub classes: ConceptClassTable,
    pub synonyms: SynonymTable,
    pub lexicon: BTreeSet<String>,
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CLASSES_FILE: &str = "concept_classes.json";

impl TextAssets {
    pub fn build(corpus: &Corpus, concept_classes: usize, min_count: usize) -> Result<Self> {
        let captions: Vec<Vec<String>> = corpus
            .videos
            .iter()
            .flat_map(|v| v.captions.iter().map(|c| tokenize(c)))
            .collect();
        let synonyms = SynonymTable::new(&corpus.synonyms);
        let lexicon: BTreeSet<String> = corpus.lexicon.iter().cloned().collect();
        let classes = build_concept_classes(&captions, &lexicon, &synonyms, concept_classes)?;
        let vocab = Vocabulary::build(&captions, min_count)?;
        Ok(Self {
            vocab,
            classes,
            synonyms,
            lexicon,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        self.classes.save(&dir.join(CLASSES_FILE))
    }

    pub fn load(dir: &Path, corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
            classes: ConceptClassTable::load(&dir.join(CLASSES_FILE))?,
            synonyms: SynonymTable::new(&corpus.synonyms),
            lexicon: corpus.lexicon.iter().cloned().collect(),
        })
    }

    /// Framed token ids of every caption of a video.
    pub fn encode_captions(&self, video: &VideoRecord) -> Vec<Vec<usize>> {
        video
            .captions
            .iter()
            .map(|c| self.vocab.encode(&tokenize(c)))
            .collect()
    }

    /// Tokens of a generated id sequence with special tokens dropped.
    pub fn body_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i > EOS_ID)
            .map(|&i| self.vocab.token(i).to_string())
            .collect()
    }
}

pub fn train_meta(
    videos: &[VideoRecord],
    text: &TextAssets,
    cfg: &crate::metalearner::MetaLearnerConfig,
    key_frames: usize,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<(MetaLearner, Vec<f64>)> {
    if videos.is_empty() {
        return Err(Error::validation("no videos to train the meta-learner on"));
    }
    let channels = videos[0].grid_shape().2;
    let mut model = MetaLearner::new(cfg.clone(), channels, text.vocab.len(), rng);
    let mut adam = Adam::new(&model.store, cfg.learning_rate).with_clip(5.0);
    let captions: Vec<Vec<Vec<usize>>> = videos.iter().map(|v| text.encode_captions(v)).collect();
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..videos.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &vi in chunk {
                let frames = sample_training_frames(&videos[vi], key_frames, cfg.frames_sampled, rng);
                let ci = rng.random_range(0..captions[vi].len());
                batch.push((concat_frames(&videos[vi].frames, &frames), captions[vi][ci].clone()));
            }
            let mut t = Tape::with_params(&model.store);
            let loss = model.meta_loss(&mut t, &batch)?;
            let value = t.scalar(loss.total);
            let step = curve.len();
            check_finite(value, STAGE_META, step, &describe_batch(chunk.iter().map(|&i| videos[i].id.as_str())))?;
            let grads = t.backward(loss.total).params();
            drop(t);
            adam.step(&mut model.store, &grads);
            curve.push(value);
            log.record(LogEntry {
                step,
                stage: STAGE_META.into(),
                loss: value,
                reward: None,
            })?;
        }
    }
    Ok((model, curve))
}

pub fn train_localizer(
    samples: &[LocalizerSample],
    videos: &[VideoRecord],
    num_classes: usize,
    cfg: &crate::localizer::LocalizerConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<(Localizer, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::validation("no pseudo masks to train the localizer on"));
    }
    let channels = videos[samples[0].video].grid_shape().2;
    let mut model = Localizer::new(cfg.clone(), channels, num_classes, rng);
    let mut adam = Adam::new(&model.store, cfg.learning_rate).with_clip(5.0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut t = Tape::with_params(&model.store);
            let mut terms = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let s = &samples[si];
                terms.push(model.bce_loss(&mut t, &videos[s.video].frames[s.frame], &s.targets)?);
            }
            let sum = crate::metalearner::sum_vars(&mut t, &terms);
            let loss = t.scale(sum, 1.0 / chunk.len() as f64);
            let value = t.scalar(loss);
            let step = curve.len();
            check_finite(
                value,
                STAGE_LOCALIZER,
                step,
                &describe_batch(chunk.iter().map(|&i| videos[samples[i].video].id.as_str())),
            )?;
            let grads = t.backward(loss).params();
            drop(t);
            adam.step(&mut model.store, &grads);
            curve.push(value);
            log.record(LogEntry {
                step,
                stage: STAGE_LOCALIZER.into(),
                loss: value,
                reward: None,
            })?;
        }
    }
    Ok((model, curve))
}

/// Decoder inputs with their framed captions, one entry per video.
#[derive(Clone, Copy)]
pub struct XeData<'a> {
    pub inputs: &'a [VideoInputs],
    pub captions: &'a [Vec<Vec<usize>>],
}

impl XeData<'_> {
    fn pairs(&self) -> Vec<(usize, usize)> {
        self.captions
            .iter()
            .enumerate()
            .flat_map(|(v, caps)| (0..caps.len()).map(move |c| (v, c)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XeOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Latest epoch's parameters are written to `<dir>/latest`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl XeOptions {
    pub fn from_decoder(cfg: &DecoderConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            clip_norm: cfg.clip_norm,
            max_steps: None,
            checkpoint_dir: None,
        }
    }
}

/// Cross-entropy training over every (video, caption) pair, reshuffled each
/// epoch. Returns the loss of every step.
pub fn train_xe(
    model: &mut CaptionModel,
    data: XeData<'_>,
    opts: &XeOptions,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<Vec<f64>> {
    let mut pairs = data.pairs();
    if pairs.is_empty() && opts.epochs > 0 {
        return Err(Error::validation("no captions to train on"));
    }
    let mut adam = Adam::new(&model.store, opts.learning_rate).with_clip(opts.clip_norm);
    let mut curve = Vec::new();
    'epochs: for epoch in 0..opts.epochs {
        pairs.shuffle(rng);
        for chunk in pairs.chunks(opts.batch_size.max(1)) {
            if opts.max_steps.is_some_and(|m| curve.len() >= m) {
                break 'epochs;
            }
            let batch: Vec<(&VideoInputs, &[usize])> = chunk
                .iter()
                .map(|&(v, c)| (&data.inputs[v], data.captions[v][c].as_slice()))
                .collect();
            let mut t = Tape::with_params(&model.store);
            let loss = model.xe_loss(&mut t, &batch)?;
            let value = t.scalar(loss);
            let step = curve.len();
            check_finite(
                value,
                "xe",
                step,
                &describe_batch(chunk.iter().map(|&(v, _)| data.inputs[v].id.as_str())),
            )?;
            let grads = t.backward(loss).params();
            drop(t);
            adam.step(&mut model.store, &grads);
            curve.push(value);
            log.record(LogEntry {
                step,
                stage: "xe".into(),
                loss: value,
                reward: None,
            })?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let latest = dir.join("latest");
            model.store.save(&latest)?;
            write_file(&latest.join("epoch.txt"), format!("{}\n", epoch + 1))?;
        }
    }
    Ok(curve)
}

/// Mean per-token cross-entropy over every caption.
pub fn mean_xe(model: &CaptionModel, data: XeData<'_>) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for (inp, caps) in data.inputs.iter().zip(data.captions) {
        for ids in caps {
            let mut t = Tape::with_params(&model.store);
            let tf = model.teacher_forced(&mut t, &[(inp, ids.as_slice())])?;
            nll += t.scalar(tf.nll);
            tokens += tf.tokens;
        }
    }
    if tokens == 0 {
        return Err(Error::validation("no captions to evaluate"));
    }
    Ok(nll / tokens as f64)
}

/// Mean teacher-forced token accuracy over every caption.
pub fn token_accuracy(model: &CaptionModel, data: XeData<'_>) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for (inp, caps) in data.inputs.iter().zip(data.captions) {
        for ids in caps {
            let (c, n) = model.token_accuracy(inp, ids)?;
            correct += c;
            total += n;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// `-advantage * sum_t log p(w_t)`.
pub fn scst_objective(t: &mut Tape, log_prob: Var, advantage: f64) -> Var {
    t.scale(log_prob, -advantage)
}

pub struct ScstOutcome {
    pub loss: Var,
    pub sample: Vec<usize>,
    pub reward_sample: f64,
    pub reward_greedy: f64,
}

/// Self-critical loss for video `index` of the scorer's corpus: one
/// multinomial sample against the greedy decode as baseline, CIDEr reward.
#[allow(clippy::too_many_arguments)]
pub fn scst_loss<R: Rng + ?Sized>(
    t: &mut Tape,
    model: &CaptionModel,
    inp: &VideoInputs,
    index: usize,
    scorer: &CiderScorer,
    text: &TextAssets,
    temperature: f64,
    rng: &mut R,
) -> Result<ScstOutcome> {
    if index >= scorer.num_videos() {
        return Err(Error::validation(format!("video index {index} has no references")));
    }
    let stepper = model.stepper(inp)?;
    let max_len = model.config.max_len;
    let sample = sample_sequence(&stepper, max_len, temperature, rng)?;
    let greedy = crate::captioner::greedy_decode(&stepper, max_len);
    let reward_sample = scorer.score(index, &text.body_tokens(&sample));
    let reward_greedy = scorer.score(index, &text.body_tokens(&greedy));
    let mut ids = Vec::with_capacity(sample.len() + 1);
    ids.push(BOS_ID);
    ids.extend(&sample);
    let lp = model.sequence_log_prob(t, inp, &ids)?;
    let loss = scst_objective(t, lp, reward_sample - reward_greedy);
    Ok(ScstOutcome {
        loss,
        sample,
        reward_sample,
        reward_greedy,
    })
}

/// Self-critical fine-tuning; `scorer` references are indexed like `inputs`.
/// Returns (loss, mean sample reward) per step.
#[allow(clippy::too_many_arguments)]
pub fn train_scst(
    model: &mut CaptionModel,
    inputs: &[VideoInputs],
    scorer: &CiderScorer,
    text: &TextAssets,
    cfg: &ScstConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<Vec<(f64, f64)>> {
    if inputs.len() != scorer.num_videos() {
        return Err(Error::validation("every video needs references for its reward"));
    }
    let mut adam = Adam::new(&model.store, cfg.learning_rate).with_clip(model.config.clip_norm);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut chunk = Vec::with_capacity(cfg.batch_size);
        while chunk.len() < cfg.batch_size.min(inputs.len()) {
            if order.is_empty() {
                order = (0..inputs.len()).collect();
                order.shuffle(rng);
            }
            chunk.push(order.pop().expect("refilled"));
        }
        let mut t = Tape::with_params(&model.store);
        let mut terms = Vec::with_capacity(chunk.len());
        let mut reward = 0.0;
        for &i in &chunk {
            let o = scst_loss(&mut t, model, &inputs[i], i, scorer, text, cfg.temperature, rng)?;
            reward += o.reward_sample;
            terms.push(o.loss);
        }
        let sum = crate::metalearner::sum_vars(&mut t, &terms);
        let loss = t.scale(sum, 1.0 / chunk.len() as f64);
        let value = t.scalar(loss);
        check_finite(value, "scst", step, &describe_batch(chunk.iter().map(|&i| inputs[i].id.as_str())))?;
        let grads = t.backward(loss).params();
        drop(t);
        adam.step(&mut model.store, &grads);
        let mean_reward = reward / chunk.len() as f64;
        history.push((value, mean_reward));
        log.record(LogEntry {
            step,
            stage: "scst".into(),
            loss: value,
            reward: Some(mean_reward),
        })?;
    }
    Ok(history)
}

pub fn generate_captions(
    model: &CaptionModel,
    inputs: &[VideoInputs],
    text: &TextAssets,
    beam: usize,
) -> Result<Vec<Vec<String>>> {
    inputs
        .iter()
        .map(|inp| Ok(text.body_tokens(&model.generate(inp, beam)?)))
        .collect()
}

pub fn references(videos: &[&VideoRecord]) -> Vec<Vec<Vec<String>>> {
    videos
        .iter()
        .map(|v| v.captions.iter().map(|c| tokenize(c)).collect())
        .collect()
}

/// Captions as `{video_id: caption}`.
pub fn captions_json(ids: &[String], captions: &[Vec<String>]) -> String {
    let map: std::collections::BTreeMap<&str, String> = ids
        .iter()
        .zip(captions)
        .map(|(id, c)| (id.as_str(), c.join(" ")))
        .collect();
    serde_json::to_string_pretty(&map).expect("captions serialise")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Xe,
    Scst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerReport {
    pub ablation: String,
    pub decoder_dim: usize,
    pub parameters: usize,
    pub xe_steps: usize,
    pub initial_xe: Option<f64>,
    pub final_xe: Option<f64>,
    pub heldout_xe: f64,
    pub heldout_scores: ScoreReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_cider_before_scst: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_cider_after_scst: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Ablation,
    pub report: CaptionerReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// The comparison grid: baseline, each module alone, both graphs, all.
pub fn ablation_grid(base: &Ablation) -> Vec<(String, Ablation)> {
    let mk = |meta: bool, fg: bool, vg: bool| Ablation {
        no_meta: !meta,
        no_fg: !fg,
        no_vg: !vg,
        ..base.clone()
    };
    vec![
        ("BL".into(), mk(false, false, false)),
        ("+MC".into(), mk(true, false, false)),
        ("+FG".into(), mk(false, true, false)),
        ("+VG".into(), mk(false, false, true)),
        ("+FG+VG".into(), mk(false, true, true)),
        ("All".into(), mk(true, true, true)),
    ]
}

fn describe_ablation(a: &Ablation) -> String {
    let mut parts = vec!["BL".to_string()];
    if !a.no_meta {
        parts.push(format!("MC({:?})", a.meta_features).to_lowercase());
    }
    if !a.no_fg {
        parts.push("FG".into());
    }
    if !a.no_vg {
        parts.push(if a.vg_no_pred { "VG(no rel)".into() } else { "VG".into() });
    }
    parts.join("+")
}

/// A run directory bound to a configuration and a corpus.
pub struct Pipeline {
    pub config: Config,
    pub corpus: Corpus,
    pub out: PathBuf,
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub localization: Option<LocalizationReport>,
    pub captioner: Option<CaptionerReport>,
}

impl Pipeline {
    pub fn new(config: Config, corpus: Corpus, out: &Path) -> Self {
        Self {
            config,
            corpus,
            out: out.to_path_buf(),
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    pub fn stage_done(&self, stage: &str) -> bool {
        self.stage_dir(stage).join(DONE_MARKER).is_file()
    }

    fn mark_done(&self, stage: &str) -> Result<()> {
        write_file(&self.stage_dir(stage).join(DONE_MARKER), "")
    }

    fn require(&self, stage: &str, missing: &str) -> Result<()> {
        if self.stage_done(missing) {
            Ok(())
        } else {
            Err(Error::StageDependency {
                stage: stage.into(),
                missing: missing.into(),
            })
        }
    }

    fn log(&self) -> TrainLog {
        TrainLog::appending(&self.out.join(LOG_FILE))
    }

    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        self.corpus.split(self.config.data.holdout_fraction)
    }

    fn videos(&self, idx: &[usize]) -> Vec<VideoRecord> {
        idx.iter().map(|&i| self.corpus.videos[i].clone()).collect()
    }

    /// Builds the vocabulary and concept classes, or loads them if present.
    pub fn text(&self) -> Result<TextAssets> {
        if self.out.join(VOCAB_FILE).is_file() && self.out.join(CLASSES_FILE).is_file() {
            return TextAssets::load(&self.out, &self.corpus);
        }
        self.build_vocab()
    }

    pub fn build_vocab(&self) -> Result<TextAssets> {
        let d = &self.config.data;
        let text = TextAssets::build(&self.corpus, d.concept_classes, d.min_count)?;
        text.save(&self.out)?;
        Ok(text)
    }

    pub fn train_meta(&self) -> Result<MetaLearner> {
        let text = self.text()?;
        let (train, _) = self.split();
        let mut rng = stage_rng(self.config.seed, 1);
        let (model, _) = train_meta(
            &self.videos(&train),
            &text,
            &self.config.meta,
            self.config.data.key_frames,
            &mut rng,
            &mut self.log(),
        )?;
        model.store.save(&self.stage_dir(STAGE_META).join("model"))?;
        Ok(model)
    }

    pub fn load_meta(&self) -> Result<MetaLearner> {
        let dir = self.stage_dir(STAGE_META).join("model");
        if !dir.is_dir() {
            return Err(Error::StageDependency {
                stage: "export-masks".into(),
                missing: format!("{STAGE_META}/model"),
            });
        }
        let text = self.text()?;
        let channels = self.corpus.videos[0].grid_shape().2;
        let mut rng = stage_rng(self.config.seed, 1);
        let mut model = MetaLearner::new(self.config.meta.clone(), channels, text.vocab.len(), &mut rng);
        model.store.load_into(&self.stage_dir(STAGE_META).join("model"))?;
        Ok(model)
    }

    pub fn export_masks(&self, model: &MetaLearner) -> Result<PseudoMasks> {
        let text = self.text()?;
        let (train, _) = self.split();
        let ctx = ExportContext {
            vocab: &text.vocab,
            classes: &text.classes,
            synonyms: &text.synonyms,
            lexicon: &text.lexicon,
            key_frames: self.config.data.key_frames,
        };
        let masks = model.export_pseudo_masks(&self.videos(&train), &ctx)?;
        let (h, w, _) = self.corpus.videos[0].grid_shape();
        masks.write(&self.stage_dir(STAGE_META).join("masks"), (h, w), &text.classes)?;
        self.mark_done(STAGE_META)?;
        Ok(masks)
    }

    pub fn stage_meta(&self) -> Result<()> {
        let model = self.train_meta()?;
        self.export_masks(&model)?;
        Ok(())
    }

    pub fn train_localizer(&self) -> Result<(Localizer, LocalizationReport)> {
        self.require(STAGE_LOCALIZER, STAGE_META)?;
        let text = self.text()?;
        let masks = PseudoMasks::read(&self.stage_dir(STAGE_META).join("masks"))?;
        let samples = build_samples(&masks, &self.corpus.videos, text.classes.len())?;
        let mut rng = stage_rng(self.config.seed, 2);
        let (model, _) = train_localizer(
            &samples,
            &self.corpus.videos,
            text.classes.len(),
            &self.config.localizer,
            &mut rng,
            &mut self.log(),
        )?;
        let dir = self.stage_dir(STAGE_LOCALIZER);
        model.store.save(&dir.join("model"))?;
        let report = evaluate_localization(&model, &self.corpus.videos, &text.classes, &text.synonyms);
        write_file(
            &dir.join("localization.json"),
            serde_json::to_string_pretty(&report).expect("report serialises"),
        )?;
        let mut dets = Vec::new();
        for v in &self.corpus.videos {
            let keys = crate::datagen::select_keyframes(&v.frames, self.config.data.key_frames);
            dets.extend(model.detect_video(v, &keys));
        }
        write_file(&dir.join("concepts.jsonl"), crate::localizer::detections_to_jsonl(&dets))?;
        self.mark_done(STAGE_LOCALIZER)?;
        Ok((model, report))
    }

    pub fn load_localizer(&self) -> Result<Localizer> {
        self.require(STAGE_CAPTIONER, STAGE_LOCALIZER)?;
        let text = self.text()?;
        let channels = self.corpus.videos[0].grid_shape().2;
        let mut rng = stage_rng(self.config.seed, 2);
        let mut model = Localizer::new(self.config.localizer.clone(), channels, text.classes.len(), &mut rng);
        model.store.load_into(&self.stage_dir(STAGE_LOCALIZER).join("model"))?;
        Ok(model)
    }

    /// Decoder inputs for every video, with the localizer if meta concepts
    /// are enabled.
    pub fn inputs(&self, ablation: &Ablation) -> Result<Vec<VideoInputs>> {
        let localizer = if ablation.no_meta {
            None
        } else {
            Some(self.load_localizer()?)
        };
        self.corpus
            .videos
            .iter()
            .map(|v| {
                prepare_inputs(
                    v,
                    self.config.data.key_frames,
                    localizer.as_ref(),
                    &self.corpus.scene_classes,
                )
            })
            .collect()
    }

    pub fn new_captioner(&self, text: &TextAssets, ablation: &Ablation) -> Result<CaptionModel> {
        let shape = ModelShape::of(
            &self.corpus.videos[0],
            text.classes.len(),
            self.corpus.scene_classes.clone(),
            text.vocab.len(),
        );
        let mut rng = stage_rng(self.config.seed, 3);
        CaptionModel::new(
            &shape,
            self.config.decoder.clone(),
            &self.config.graph,
            &self.config.scene,
            ablation.clone(),
            &mut rng,
        )
    }

    pub fn load_captioner(&self) -> Result<CaptionModel> {
        self.require("generate", STAGE_CAPTIONER)?;
        let text = self.text()?;
        let mut model = self.new_captioner(&text, &self.config.ablation)?;
        model.store.load_into(&self.stage_dir(STAGE_CAPTIONER).join("model"))?;
        Ok(model)
    }

    /// Trains one captioner under `ablation`; `dir` receives checkpoints.
    pub fn fit_captioner(
        &self,
        ablation: &Ablation,
        loss: LossKind,
        dir: Option<&Path>,
    ) -> Result<(CaptionModel, CaptionerReport)> {
        if !ablation.no_meta {
            self.require(STAGE_CAPTIONER, STAGE_LOCALIZER)?;
        }
        let text = self.text()?;
        let inputs = self.inputs(ablation)?;
        let captions: Vec<Vec<Vec<usize>>> = self.corpus.videos.iter().map(|v| text.encode_captions(v)).collect();
        let (train, test) = self.split();
        let pick = |idx: &[usize]| -> (Vec<VideoInputs>, Vec<Vec<Vec<usize>>>) {
            (
                idx.iter().map(|&i| inputs[i].clone()).collect(),
                idx.iter().map(|&i| captions[i].clone()).collect(),
            )
        };
        let (train_in, train_caps) = pick(&train);
        let (test_in, test_caps) = pick(&test);
        let mut model = self.new_captioner(&text, ablation)?;
        let mut opts = XeOptions::from_decoder(&self.config.decoder);
        opts.checkpoint_dir = dir.map(|d| d.join("checkpoints"));
        let mut rng = stage_rng(self.config.seed, 4);
        let mut log = self.log();
        let train_data = XeData {
            inputs: &train_in,
            captions: &train_caps,
        };
        let curve = train_xe(&mut model, train_data, &opts, &mut rng, &mut log)?;

        let mut report = CaptionerReport {
            ablation: describe_ablation(ablation),
            decoder_dim: model.decoder_dim(),
            parameters: model.store.num_scalars(),
            xe_steps: curve.len(),
            initial_xe: curve.first().copied(),
            final_xe: curve.last().copied(),
            heldout_xe: 0.0,
            heldout_scores: ScoreReport {
                bleu1: 0.0,
                bleu2: 0.0,
                bleu3: 0.0,
                bleu4: 0.0,
                rouge_l: 0.0,
                cider: 0.0,
            },
            train_cider_before_scst: None,
            train_cider_after_scst: None,
        };
        if loss == LossKind::Scst && self.config.scst.steps > 0 {
            let train_refs = references(&train.iter().map(|&i| &self.corpus.videos[i]).collect::<Vec<_>>());
            let scorer = CiderScorer::new(train_refs);
            let before = generate_captions(&model, &train_in, &text, 1)?;
            report.train_cider_before_scst = Some(scorer.corpus_score(&before)?);
            train_scst(&mut model, &train_in, &scorer, &text, &self.config.scst, &mut rng, &mut log)?;
            let after = generate_captions(&model, &train_in, &text, 1)?;
            report.train_cider_after_scst = Some(scorer.corpus_score(&after)?);
        }
        let eval_in = if test_in.is_empty() { &train_in } else { &test_in };
        let eval_caps = if test_in.is_empty() { &train_caps } else { &test_caps };
        let eval_idx = if test.is_empty() { &train } else { &test };
        report.heldout_xe = mean_xe(
            &model,
            XeData {
                inputs: eval_in,
                captions: eval_caps,
            },
        )?;
        let generated = generate_captions(&model, eval_in, &text, self.config.decoder.beam)?;
        let refs = references(&eval_idx.iter().map(|&i| &self.corpus.videos[i]).collect::<Vec<_>>());
        report.heldout_scores = score_corpus(&generated, &refs)?;
        Ok((model, report))
    }

    pub fn train_captioner(&self, loss: LossKind) -> Result<CaptionerReport> {
        let dir = self.stage_dir(STAGE_CAPTIONER);
        let (model, report) = self.fit_captioner(&self.config.ablation, loss, Some(&dir))?;
        model.store.save(&dir.join("model"))?;
        write_file(
            &dir.join("report.json"),
            serde_json::to_string_pretty(&report).expect("report serialises"),
        )?;
        self.mark_done(STAGE_CAPTIONER)?;
        Ok(report)
    }

    /// Captions for every video of the corpus.
    pub fn generate(&self, beam: usize) -> Result<String> {
        let text = self.text()?;
        let model = self.load_captioner()?;
        let inputs = self.inputs(&model.ablation)?;
        let caps = generate_captions(&model, &inputs, &text, beam)?;
        let ids: Vec<String> = self.corpus.videos.iter().map(|v| v.id.clone()).collect();
        Ok(captions_json(&ids, &caps))
    }

    pub fn run_recipe(&self, loss: LossKind) -> Result<RecipeReport> {
        self.config.save(&self.out.join("config.toml"))?;
        let mut report = RecipeReport {
            ran: Vec::new(),
            skipped: Vec::new(),
            localization: None,
            captioner: None,
        };
        if self.stage_done(STAGE_META) {
            report.skipped.push(STAGE_META.into());
        } else {
            self.stage_meta()?;
            report.ran.push(STAGE_META.into());
        }
        if self.stage_done(STAGE_LOCALIZER) {
            report.skipped.push(STAGE_LOCALIZER.into());
        } else {
            report.localization = Some(self.train_localizer()?.1);
            report.ran.push(STAGE_LOCALIZER.into());
        }
        if self.stage_done(STAGE_CAPTIONER) {
            report.skipped.push(STAGE_CAPTIONER.into());
        } else {
            report.captioner = Some(self.train_captioner(loss)?);
            report.ran.push(STAGE_CAPTIONER.into());
        }
        Ok(report)
    }

    /// Trains the comparison grid on one corpus and writes `ablation.json`.
    pub fn ablate(&self) -> Result<AblationReport> {
        let mut rows = Vec::new();
        for (name, flags) in ablation_grid(&self.config.ablation) {
            log::info!("ablation row {name}");
            let (_, report) = self.fit_captioner(&flags, LossKind::Xe, None)?;
            rows.push(AblationRow { name, flags, report });
        }
        let report = AblationReport { rows };
        write_file(
            &self.out.join("ablation.json"),
            serde_json::to_string_pretty(&report).expect("report serialises"),
        )?;
        Ok(report)
    }
}
