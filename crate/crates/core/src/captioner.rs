//! LSTM caption decoder over `R_dec = [R_con, R_meta, R_obj]`.
//!
//! `R_dec` is computed once per video and concatenated with the previous
//! word embedding at every step. Parts switched off by [`Ablation`] are
//! left out of `R_dec` altogether, so the decoder input shrinks with them.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{BOS_ID as BOS, EOS_ID as EOS, PAD_ID as PAD};
use crate::datagen::{select_keyframes, SceneClasses, VideoRecord};
use crate::error::{Error, Result};
use crate::localizer::{ConceptDetection, Localizer};
use crate::metagraph::{MetaGraphConfig, MetaGraphEncoder};
use crate::nn::{Linear, LstmCell};
use crate::params::{ParamId, ParamStore};
use crate::scenegraph::{build_frame_graph, FrameGraph, SceneConfig, SceneEncoder, SceneParts};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaFeatures {
    Visual,
    Semantic,
    #[default]
    Both,
}

impl std::str::FromStr for MetaFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Self::Visual),
            "semantic" => Ok(Self::Semantic),
            "both" => Ok(Self::Both),
            _ => Err(Error::validation(format!(
                "meta features must be visual, semantic or both, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_context: bool,
    pub no_meta: bool,
    pub no_fg: bool,
    pub no_vg: bool,
    pub vg_no_pred: bool,
    pub meta_features: MetaFeatures,
}

impl Ablation {
    /// Baseline: context streams only.
    pub fn baseline() -> Self {
        Self {
            no_meta: true,
            no_fg: true,
            no_vg: true,
            ..Default::default()
        }
    }

    fn scene_parts(&self) -> SceneParts {
        SceneParts {
            frame: !self.no_fg,
            video: !self.no_vg,
            video_without_predicates: self.vg_no_pred,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub word_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: bool,
    pub clip_norm: f64,
    pub epochs: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            word_dim: 512,
            proj_dim: 512,
            hidden: 512,
            learning_rate: 8e-5,
            batch_size: 32,
            beam: 5,
            max_len: 16,
            length_norm: true,
            clip_norm: 5.0,
            epochs: 30,
        }
    }
}

/// Everything the decoder needs from one video, with parameter-free parts
/// precomputed.
#[derive(Clone, Debug)]
pub struct VideoInputs {
    pub id: String,
    /// Key-frame rows of each context stream, in stream-name order.
    pub context: Vec<Mat>,
    pub detections: Vec<ConceptDetection>,
    pub frame_graphs: Vec<FrameGraph>,
}

pub fn prepare_inputs(
    video: &VideoRecord,
    key_frames: usize,
    localizer: Option<&Localizer>,
    scene_classes: &SceneClasses,
) -> Result<VideoInputs> {
    let keys = select_keyframes(&video.frames, key_frames);
    let context = video.context.values().map(|m| m.select_rows(&keys)).collect();
    let detections = localizer.map_or_else(Vec::new, |l| l.detect_video(video, &keys));
    let mut frame_graphs = Vec::new();
    for &k in &keys {
        if let Some(g) = video.scene_graph(k) {
            frame_graphs.push(build_frame_graph(g, scene_classes)?);
        }
    }
    Ok(VideoInputs {
        id: video.id.clone(),
        context,
        detections,
        frame_graphs,
    })
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub store: ParamStore,
    pub config: DecoderConfig,
    pub ablation: Ablation,
    pub vocab_size: usize,
    pub streams: Vec<(String, Linear)>,
    pub semantic: Option<ParamId>,
    pub metagraph: Option<MetaGraphEncoder>,
    pub scene: Option<SceneEncoder>,
    pub word_embedding: ParamId,
    pub lstm: LstmCell,
    pub output: Linear,
    pub composition: Vec<(String, usize)>,
}

/// Shapes of the inputs a model is built for.
#[derive(Clone, Debug)]
pub struct ModelShape {
    /// Stream name and per-frame dimension, in name order.
    pub streams: Vec<(String, usize)>,
    pub channels: usize,
    pub num_concepts: usize,
    pub scene_classes: SceneClasses,
    pub vocab_size: usize,
}

impl ModelShape {
    pub fn of(video: &VideoRecord, num_concepts: usize, scene_classes: SceneClasses, vocab_size: usize) -> Self {
        Self {
            streams: video.context.iter().map(|(k, m)| (k.clone(), m.cols())).collect(),
            channels: video.grid_shape().2,
            num_concepts,
            scene_classes,
            vocab_size,
        }
    }
}

impl CaptionModel {
    pub fn new<R: Rng + ?Sized>(
        shape: &ModelShape,
        config: DecoderConfig,
        graph: &MetaGraphConfig,
        scene: &SceneConfig,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut composition = Vec::new();
        let mut streams = Vec::new();
        if !ablation.no_context {
            for (name, dim) in &shape.streams {
                let lin = Linear::new(&mut store, &format!("context.{name}"), *dim, config.proj_dim, true, rng);
                composition.push((format!("context:{name}"), config.proj_dim));
                streams.push((name.clone(), lin));
            }
        }
        let (semantic, metagraph) = if ablation.no_meta {
            (None, None)
        } else {
            if shape.num_concepts == 0 {
                return Err(Error::validation("meta concepts enabled but the class table is empty"));
            }
            let s = store.add(
                "meta.semantic",
                Mat::random_normal(shape.num_concepts, shape.channels, 0.1, rng),
            );
            let enc = MetaGraphEncoder::new(&mut store, "meta.graph", shape.channels, graph.clone(), rng);
            composition.push(("meta".into(), enc.out_dim()));
            (Some(s), Some(enc))
        };
        let parts = ablation.scene_parts();
        let scene = if parts.frame || parts.video {
            let enc = SceneEncoder::new(&mut store, "scene", shape.scene_classes.clone(), scene.clone(), rng);
            if parts.frame {
                composition.push(("frame_graph".into(), enc.out_dim()));
            }
            if parts.video {
                composition.push(("video_graph".into(), enc.out_dim()));
            }
            Some(enc)
        } else {
            None
        };
        let dec_dim: usize = composition.iter().map(|c| c.1).sum();
        if dec_dim == 0 {
            return Err(Error::validation("every decoder input is ablated"));
        }
        let word_embedding = store.add(
            "decoder.embedding",
            Mat::random_normal(shape.vocab_size, config.word_dim, 0.1, rng),
        );
        let lstm = LstmCell::new(&mut store, "decoder.lstm", config.word_dim + dec_dim, config.hidden, rng);
        let output = Linear::new(&mut store, "decoder.output", config.hidden, shape.vocab_size, true, rng);
        Ok(Self {
            store,
            config,
            ablation,
            vocab_size: shape.vocab_size,
            streams,
            semantic,
            metagraph,
            scene,
            word_embedding,
            lstm,
            output,
            composition,
        })
    }

    pub fn decoder_dim(&self) -> usize {
        self.composition.iter().map(|c| c.1).sum()
    }

    /// Node features of the meta-concept graph, `None` when no concept was
    /// detected.
    pub fn concept_nodes(&self, t: &mut Tape, dets: &[ConceptDetection]) -> Option<Var> {
        let s = self.semantic?;
        if dets.is_empty() {
            return None;
        }
        let classes: Vec<usize> = dets.iter().map(|d| d.class).collect();
        let v_rows: Vec<Vec<f64>> = dets.iter().map(|d| d.v.clone()).collect();
        let visual = || Mat::from_rows(&v_rows);
        Some(match self.ablation.meta_features {
            MetaFeatures::Visual => t.constant(visual()),
            MetaFeatures::Semantic => {
                let s = t.param(s);
                t.gather_rows(s, &classes)
            }
            MetaFeatures::Both => {
                let v = t.constant(visual());
                let s = t.param(s);
                let s = t.gather_rows(s, &classes);
                t.add(v, s)
            }
        })
    }

    /// `R_dec`, `1 x decoder_dim`.
    pub fn decoder_input(&self, t: &mut Tape, inp: &VideoInputs) -> Result<Var> {
        let mut parts = Vec::new();
        if !self.streams.is_empty() {
            if inp.context.len() != self.streams.len() {
                return Err(Error::validation(format!(
                    "video {} has {} context streams, model expects {}",
                    inp.id,
                    inp.context.len(),
                    self.streams.len()
                )));
            }
            for ((_, lin), m) in self.streams.iter().zip(&inp.context) {
                let c = t.constant(m.clone());
                let pooled = t.mean_rows(c);
                parts.push(lin.forward(t, pooled));
            }
        }
        if let Some(enc) = &self.metagraph {
            let x = self.concept_nodes(t, &inp.detections);
            parts.push(enc.encode(t, x));
        }
        if let Some(scene) = &self.scene {
            if let Some(r) = scene.encode(t, &inp.frame_graphs, self.ablation.scene_parts())? {
                parts.push(r);
            }
        }
        Ok(if parts.len() == 1 { parts[0] } else { t.concat_cols(&parts) })
    }

    pub fn decoder_input_value(&self, inp: &VideoInputs) -> Result<Mat> {
        let mut t = Tape::with_params(&self.store);
        let r = self.decoder_input(&mut t, inp)?;
        Ok(t.value(r).clone())
    }

    /// Teacher-forced pass over a batch of framed sequences. Returns the
    /// per-step log-probabilities (`B x V` each) and the summed negative
    /// log-likelihood of every non-pad target.
    pub fn teacher_forced(&self, t: &mut Tape, batch: &[(&VideoInputs, &[usize])]) -> Result<TeacherForced> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for (inp, ids) in batch {
            if ids.len() < 2 || ids[0] != BOS {
                return Err(Error::validation("sequence must start with bos and have a target"));
            }
            if ids.iter().any(|&i| i >= self.vocab_size) {
                return Err(Error::validation("token id outside vocabulary"));
            }
            rows.push(self.decoder_input(t, inp)?);
        }
        let r = t.concat_rows(&rows);
        let steps = batch.iter().map(|(_, ids)| ids.len() - 1).max().unwrap_or(0);
        let emb = t.param(self.word_embedding);
        let mut state = self.lstm.zero_state(t, batch.len());
        let mut log_probs = Vec::with_capacity(steps);
        let mut nll = Vec::with_capacity(steps);
        let mut tokens = 0usize;
        for s in 0..steps {
            let prev: Vec<usize> = batch.iter().map(|(_, ids)| ids.get(s).copied().unwrap_or(PAD)).collect();
            let targets: Vec<usize> = batch
                .iter()
                .map(|(_, ids)| ids.get(s + 1).copied().unwrap_or(PAD))
                .collect();
            let weights: Vec<f64> = batch
                .iter()
                .map(|(_, ids)| if s + 1 < ids.len() { 1.0 } else { 0.0 })
                .collect();
            tokens += weights.iter().filter(|&&w| w > 0.0).count();
            let e = t.gather_rows(emb, &prev);
            let x = t.concat_cols(&[e, r]);
            state = self.lstm.step(t, x, state);
            let logits = self.output.forward(t, state.h);
            let lp = t.log_softmax(logits);
            nll.push(t.nll(lp, &targets, &weights));
            log_probs.push(lp);
        }
        let total = crate::metalearner::sum_vars(t, &nll);
        Ok(TeacherForced {
            log_probs,
            nll: total,
            tokens,
        })
    }

    /// Mean per-token cross-entropy over the batch.
    pub fn xe_loss(&self, t: &mut Tape, batch: &[(&VideoInputs, &[usize])]) -> Result<Var> {
        if batch.iter().any(|(_, ids)| ids.len() <= 2) {
            return Err(Error::validation("empty caption"));
        }
        let tf = self.teacher_forced(t, batch)?;
        Ok(t.scale(tf.nll, 1.0 / tf.tokens as f64))
    }

    /// `sum_t log p(w_t)` of the framed sequence `ids`.
    pub fn sequence_log_prob(&self, t: &mut Tape, inp: &VideoInputs, ids: &[usize]) -> Result<Var> {
        let tf = self.teacher_forced(t, &[(inp, ids)])?;
        Ok(t.scale(tf.nll, -1.0))
    }

    /// Greedy-under-teacher-forcing accuracy: (correct, total) targets.
    pub fn token_accuracy(&self, inp: &VideoInputs, ids: &[usize]) -> Result<(usize, usize)> {
        let mut t = Tape::with_params(&self.store);
        let tf = self.teacher_forced(&mut t, &[(inp, ids)])?;
        let mut correct = 0;
        for (s, &lp) in tf.log_probs.iter().enumerate() {
            if argmax(t.value(lp).row(0), &[]) == ids[s + 1] {
                correct += 1;
            }
        }
        Ok((correct, ids.len() - 1))
    }

    pub fn stepper(&self, inp: &VideoInputs) -> Result<DecoderStepper<'_>> {
        Ok(DecoderStepper {
            model: self,
            r_dec: self.decoder_input_value(inp)?,
        })
    }

    /// Caption body (no bos/eos) by beam search; `beam = 1` is greedy.
    pub fn generate(&self, inp: &VideoInputs, beam: usize) -> Result<Vec<usize>> {
        let stepper = self.stepper(inp)?;
        let cfg = BeamConfig {
            beam,
            max_len: self.config.max_len,
            length_norm: self.config.length_norm,
        };
        Ok(beam_search(&stepper, &cfg)?.0)
    }
}

pub struct TeacherForced {
    pub log_probs: Vec<Var>,
    pub nll: Var,
    pub tokens: usize,
}

/// Incremental decoding for one video with `R_dec` fixed.
pub struct DecoderStepper<'a> {
    model: &'a CaptionModel,
    r_dec: Mat,
}

impl StepModel for DecoderStepper<'_> {
    type State = (Mat, Mat);

    fn initial(&self) -> Self::State {
        let h = self.model.config.hidden;
        (Mat::zeros(1, h), Mat::zeros(1, h))
    }

    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn step(&self, state: &Self::State, token: usize) -> (Self::State, Vec<f64>) {
        let m = self.model;
        let mut t = Tape::with_params(&m.store);
        let h = t.constant(state.0.clone());
        let c = t.constant(state.1.clone());
        let emb = t.param(m.word_embedding);
        let e = t.gather_rows(emb, &[token]);
        let r = t.constant(self.r_dec.clone());
        let x = t.concat_cols(&[e, r]);
        let s = m.lstm.step(&mut t, x, crate::nn::LstmState { h, c });
        let logits = m.output.forward(&mut t, s.h);
        let lp = t.log_softmax(logits);
        (
            (t.value(s.h).clone(), t.value(s.c).clone()),
            t.value(lp).data().to_vec(),
        )
    }
}

/// A left-to-right token model: `step` consumes `token` and returns the
/// log-distribution of the next one.
pub trait StepModel {
    type State: Clone;
    fn initial(&self) -> Self::State;
    fn vocab_size(&self) -> usize;
    fn step(&self, state: &Self::State, token: usize) -> (Self::State, Vec<f64>);
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: bool,
}

/// Tokens that may be emitted: everything except pad and bos.
pub fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

fn argmax(row: &[f64], skip: &[usize]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

/// Ranking score of a hypothesis of `len` emitted tokens (eos included).
pub fn normalized_score(sum: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm {
        sum / len.max(1) as f64
    } else {
        sum
    }
}

/// Higher score first, then lexicographically smaller token sequence.
pub fn rank_hypotheses(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search from bos. At each step every live hypothesis is extended by
/// every emittable token and the best `beam` extensions survive; those
/// ending in eos move to the finished list. Hypotheses still alive after
/// `max_len` steps finish truncated. Returns the best body (eos stripped)
/// and its ranking score.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<(Vec<usize>, f64)> {
    if cfg.beam == 0 {
        return Err(Error::validation("beam size must be at least 1"));
    }
    if cfg.max_len == 0 {
        return Ok((Vec::new(), 0.0));
    }
    struct Hyp<S> {
        tokens: Vec<usize>,
        sum: f64,
        state: S,
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        sum: 0.0,
        state: model.initial(),
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for step in 0..cfg.max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let last = h.tokens.last().copied().unwrap_or(BOS);
            let (ns, lp) = model.step(&h.state, last);
            for (tok, &l) in lp.iter().enumerate() {
                if !emittable(tok) {
                    continue;
                }
                let sum = h.sum + l;
                cands.push((hi, tok, sum, normalized_score(sum, step + 1, cfg.length_norm)));
            }
            expanded.push(ns);
        }
        let seq = |c: &(usize, usize, f64, f64)| {
            let mut s = live[c.0].tokens.clone();
            s.push(c.1);
            s
        };
        let mut keyed: Vec<(Vec<usize>, (usize, usize, f64, f64))> =
            cands.into_iter().map(|c| (seq(&c), c)).collect();
        keyed.sort_by(|a, b| rank_hypotheses((a.1 .3, &a.0), (b.1 .3, &b.0)));
        keyed.truncate(cfg.beam);
        let mut next = Vec::with_capacity(keyed.len());
        for (tokens, (hi, tok, sum, score)) in keyed {
            if tok == EOS || step + 1 == cfg.max_len {
                finished.push((tokens, score));
            } else {
                next.push(Hyp {
                    tokens,
                    sum,
                    state: expanded[hi].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(|a, b| rank_hypotheses((a.1, &a.0), (b.1, &b.0)));
    let (mut best, score) = finished.into_iter().next().expect("at least one hypothesis");
    if best.last() == Some(&EOS) {
        best.pop();
    }
    Ok((best, score))
}

/// Argmax decoding (ties to the smaller id) until eos or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Vec<usize> {
    let mut state = model.initial();
    let mut last = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (ns, lp) = model.step(&state, last);
        let tok = argmax(&lp, &[PAD, BOS]);
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = ns;
        last = tok;
    }
    out
}

/// Samples a sequence from `softmax(log p / temperature)` over emittable
/// tokens. The result keeps a final eos if one was drawn.
pub fn sample_sequence<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(temperature > 0.0) {
        return Err(Error::validation("sampling temperature must be positive"));
    }
    let mut state = model.initial();
    let mut last = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (ns, lp) = model.step(&state, last);
        let scaled: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(i, &l)| if emittable(i) { l / temperature } else { f64::NEG_INFINITY })
            .collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut tok = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && u < w {
                tok = i;
                break;
            }
            u -= w;
        }
        out.push(tok);
        if tok == EOS {
            break;
        }
        state = ns;
        last = tok;
    }
    Ok(out)
}
