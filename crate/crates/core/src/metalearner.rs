//! Weakly supervised meta-concept learning.
//!
//! An attention LSTM reads the concatenated cells of four key frames and is
//! trained to reproduce the captions. Each word step attends over the cells;
//! after training, the attention map of every concept word marks where that
//! concept is in the frames and becomes a pseudo mask for the localizer.
//!
//! Per step `i` with previous hidden state `h`:
//!
//! ```text
//! alpha_i = softmax(relu(v W_v + h W_h) W_f)          over the G cells
//! h_i     = LSTM([W_e[t_{i-1}], alpha_i v], h)
//! p_i     = softmax(h_i W_p)
//! ```
//!
//! Captions are also aligned with their videos by a bidirectional triplet
//! loss on projected sentence and video embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cmgf::FeatureTensor;
use crate::corpus::{ConceptClassTable, SynonymTable, Vocabulary};
use crate::datagen::{frame_differences, select_keyframes, top_by_score, FeatureGrid, VideoRecord};
use crate::error::{write_file, Error, Result};
use crate::nn::{Linear, LstmCell, LstmState};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Negatives {
    /// Every mismatched pair in the batch contributes a hinge term.
    #[default]
    All,
    /// Only the closest mismatched pair per anchor.
    Hardest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaLearnerConfig {
    pub attn_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub align_dim: usize,
    pub lambda: f64,
    pub margin: f64,
    pub negatives: Negatives,
    pub frames_sampled: usize,
    pub mask_threshold: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for MetaLearnerConfig {
    fn default() -> Self {
        Self {
            attn_dim: 256,
            hidden: 512,
            embed_dim: 256,
            align_dim: 256,
            lambda: 0.5,
            margin: 0.3,
            negatives: Negatives::All,
            frames_sampled: 4,
            mask_threshold: 0.5,
            batch_size: 60,
            learning_rate: 4e-4,
            epochs: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub store: ParamStore,
    pub config: MetaLearnerConfig,
    pub channels: usize,
    pub vocab_size: usize,
    pub w_v: ParamId,
    pub w_h: ParamId,
    pub w_f: ParamId,
    pub w_e: ParamId,
    pub w_p: ParamId,
    pub lstm: LstmCell,
    pub proj_visual: Linear,
    pub proj_text: Linear,
}

/// Teacher-forced pass over one caption.
pub struct CaptionTrace {
    /// `steps x V` log-probabilities; row `i` predicts `ids[i + 1]`.
    pub log_probs: Var,
    /// Attention over cells at each step, `1 x G` each.
    pub alphas: Vec<Var>,
    /// Final hidden state.
    pub sentence: Var,
}

impl MetaLearner {
    pub fn new<R: Rng + ?Sized>(
        config: MetaLearnerConfig,
        channels: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let c = &config;
        let w_v = store.add("attn.w_v", Mat::xavier(channels, c.attn_dim, rng));
        let w_h = store.add("attn.w_h", Mat::xavier(c.hidden, c.attn_dim, rng));
        let w_f = store.add("attn.w_f", Mat::xavier(c.attn_dim, 1, rng));
        let w_e = store.add("word.embedding", Mat::random_normal(vocab_size, c.embed_dim, 0.1, rng));
        let lstm = LstmCell::new(&mut store, "lstm", c.embed_dim + channels, c.hidden, rng);
        let w_p = store.add("word.w_p", Mat::xavier(c.hidden, vocab_size, rng));
        let proj_visual = Linear::new(&mut store, "align.visual", channels, c.align_dim, true, rng);
        let proj_text = Linear::new(&mut store, "align.text", c.hidden, c.align_dim, true, rng);
        Self {
            store,
            config,
            channels,
            vocab_size,
            w_v,
            w_h,
            w_f,
            w_e,
            w_p,
            lstm,
            proj_visual,
            proj_text,
        }
    }

    /// Precomputes `v W_v`, shared by every step of a caption.
    pub fn project_cells(&self, t: &mut Tape, v: Var) -> Var {
        let w_v = t.param(self.w_v);
        t.matmul(v, w_v)
    }

    /// Attention over cells and the attended context `alpha v`.
    pub fn attend(&self, t: &mut Tape, v: Var, vw: Var, h_prev: Var) -> (Var, Var) {
        let w_h = t.param(self.w_h);
        let w_f = t.param(self.w_f);
        let hw = t.matmul(h_prev, w_h);
        let pre = t.add_row(vw, hw);
        let act = t.relu(pre);
        let logits = t.matmul(act, w_f);
        let logits = t.transpose(logits);
        let alpha = t.softmax(logits);
        let ctx = t.matmul(alpha, v);
        (alpha, ctx)
    }

    /// One recurrent update from the previous word.
    pub fn step(
        &self,
        t: &mut Tape,
        prev_token: usize,
        v: Var,
        vw: Var,
        state: LstmState,
    ) -> Result<(LstmState, Var)> {
        if prev_token >= self.vocab_size {
            return Err(Error::validation(format!(
                "token id {prev_token} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let (alpha, ctx) = self.attend(t, v, vw, state.h);
        let emb = t.param(self.w_e);
        let e = t.gather_rows(emb, &[prev_token]);
        let x = t.concat_cols(&[e, ctx]);
        Ok((self.lstm.step(t, x, state), alpha))
    }

    pub fn forward_caption(&self, t: &mut Tape, v: Var, ids: &[usize]) -> Result<CaptionTrace> {
        if ids.len() < 2 {
            return Err(Error::validation("caption must be framed with bos and eos"));
        }
        let vw = self.project_cells(t, v);
        let mut state = self.lstm.zero_state(t, 1);
        let mut hs = Vec::with_capacity(ids.len() - 1);
        let mut alphas = Vec::with_capacity(ids.len() - 1);
        for &tok in &ids[..ids.len() - 1] {
            let (s, a) = self.step(t, tok, v, vw, state)?;
            state = s;
            hs.push(s.h);
            alphas.push(a);
        }
        let h = t.concat_rows(&hs);
        let w_p = t.param(self.w_p);
        let logits = t.matmul(h, w_p);
        let log_probs = t.log_softmax(logits);
        Ok(CaptionTrace {
            log_probs,
            alphas,
            sentence: state.h,
        })
    }

    /// `-sum_i log p(t_i)` over the framed caption `ids` (bos ... eos).
    pub fn word_loss(&self, t: &mut Tape, v: Var, ids: &[usize]) -> Result<(Var, CaptionTrace)> {
        if ids.len() <= 2 {
            return Err(Error::validation("empty caption"));
        }
        let trace = self.forward_caption(t, v, ids)?;
        let targets = &ids[1..];
        let loss = t.nll(trace.log_probs, targets, &vec![1.0; targets.len()]);
        Ok((loss, trace))
    }

    pub fn embed_visual(&self, t: &mut Tape, v: Var) -> Var {
        let pooled = t.mean_rows(v);
        self.proj_visual.forward(t, pooled)
    }

    pub fn embed_text(&self, t: &mut Tape, sentence: Var) -> Var {
        self.proj_text.forward(t, sentence)
    }

    /// `L_word + lambda * L_cross` over a batch of (cell grid, framed
    /// caption) pairs from distinct videos. A batch of one has no negatives
    /// and contributes the word loss only.
    pub fn meta_loss(&self, t: &mut Tape, batch: &[(Mat, Vec<usize>)]) -> Result<MetaLoss> {
        if self.config.lambda < 0.0 {
            return Err(Error::validation("lambda must be non-negative"));
        }
        let mut word_terms = Vec::with_capacity(batch.len());
        let mut visual = Vec::with_capacity(batch.len());
        let mut text = Vec::with_capacity(batch.len());
        for (grid, ids) in batch {
            let v = t.constant(grid.clone());
            let (lw, trace) = self.word_loss(t, v, ids)?;
            word_terms.push(lw);
            visual.push(self.embed_visual(t, v));
            text.push(self.embed_text(t, trace.sentence));
        }
        let word = sum_vars(t, &word_terms);
        let cross = if batch.len() >= 2 {
            Some(alignment_loss(t, &visual, &text, self.config.margin, self.config.negatives)?)
        } else {
            None
        };
        let total = match cross {
            Some(c) => combine_meta(t, word, c, self.config.lambda)?,
            None => word,
        };
        Ok(MetaLoss { total, word, cross })
    }
}

pub struct MetaLoss {
    pub total: Var,
    pub word: Var,
    pub cross: Option<Var>,
}

pub(crate) fn sum_vars(t: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = t.add(acc, v);
    }
    acc
}

/// `word + lambda * cross`.
pub fn combine_meta(t: &mut Tape, word: Var, cross: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::validation("lambda must be non-negative"));
    }
    let scaled = t.scale(cross, lambda);
    Ok(t.add(word, scaled))
}

/// Bidirectional triplet loss with Euclidean distance.
///
/// For every anchor `a` and every mismatched index `n != a`:
/// `[d(v_a, h_a) - d(v_a, h_n) + m]_+ + [d(h_a, v_a) - d(h_a, v_n) + m]_+`.
/// With [`Negatives::Hardest`] only the closest mismatched pair per anchor
/// and direction is used.
pub fn alignment_loss(
    t: &mut Tape,
    visual: &[Var],
    text: &[Var],
    margin: f64,
    negatives: Negatives,
) -> Result<Var> {
    let m = visual.len();
    if m < 2 || text.len() != m {
        return Err(Error::validation(format!(
            "alignment needs at least two matched pairs, got {} visual and {} text",
            m,
            text.len()
        )));
    }
    let dim = t.shape(visual[0]);
    if visual.iter().chain(text).any(|&v| t.shape(v) != dim) {
        return Err(Error::validation("alignment embeddings differ in shape"));
    }
    // dist[i][j] = d(v_i, h_j)
    let mut dist = vec![vec![None; m]; m];
    for i in 0..m {
        for j in 0..m {
            dist[i][j] = Some(t.euclidean(visual[i], text[j]));
        }
    }
    let d = |i: usize, j: usize| dist[i][j].expect("filled");
    let mut terms = Vec::new();
    for a in 0..m {
        let mut push_dir = |t: &mut Tape, pos: Var, negs: Vec<Var>| {
            let chosen: Vec<Var> = match negatives {
                Negatives::All => negs,
                Negatives::Hardest => {
                    let best = negs
                        .iter()
                        .copied()
                        .min_by(|x, y| t.scalar(*x).total_cmp(&t.scalar(*y)))
                        .expect("m >= 2");
                    vec![best]
                }
            };
            for n in chosen {
                let diff = t.sub(pos, n);
                let shifted = t.add_scalar(diff, margin);
                terms.push(t.relu(shifted));
            }
        };
        // Video anchor against mismatched sentences.
        let negs: Vec<Var> = (0..m).filter(|&n| n != a).map(|n| d(a, n)).collect();
        push_dir(t, d(a, a), negs);
        // Sentence anchor against mismatched videos.
        let negs: Vec<Var> = (0..m).filter(|&n| n != a).map(|n| d(n, a)).collect();
        push_dir(t, d(a, a), negs);
    }
    Ok(sum_vars(t, &terms))
}

/// A batch of aligned embeddings as plain values.
#[derive(Clone, Debug)]
pub struct AlignmentBatch {
    pub visual: Vec<Mat>,
    pub text: Vec<Mat>,
    pub margin: f64,
}

impl AlignmentBatch {
    pub fn loss(&self, negatives: Negatives) -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = self.visual.iter().map(|m| t.constant(m.clone())).collect();
        let h: Vec<Var> = self.text.iter().map(|m| t.constant(m.clone())).collect();
        let l = alignment_loss(&mut t, &v, &h, self.margin, negatives)?;
        Ok(t.scalar(l))
    }
}

/// Concatenates the cells of the given frames into one `G x D` matrix.
pub fn concat_frames(frames: &[FeatureGrid], indices: &[usize]) -> Mat {
    let parts: Vec<&Mat> = indices.iter().map(|&i| frames[i].cells()).collect();
    Mat::vstack(&parts)
}

/// Random frames (sorted, without replacement) from the key frames.
pub fn sample_training_frames<R: Rng + ?Sized>(
    video: &VideoRecord,
    key_frames: usize,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let keys = select_keyframes(&video.frames, key_frames);
    let mut picked = rand::seq::index::sample(rng, keys.len(), count.min(keys.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| keys[i]).collect()
}

/// Deterministic export frames: the `count` key frames with the largest
/// frame difference, in temporal order.
pub fn export_frames(video: &VideoRecord, key_frames: usize, count: usize) -> Vec<usize> {
    let keys = select_keyframes(&video.frames, key_frames);
    let diffs = frame_differences(&video.frames);
    let key_diffs: Vec<f64> = keys.iter().map(|&k| diffs[k]).collect();
    top_by_score(&key_diffs, count)
        .into_iter()
        .map(|i| keys[i])
        .collect()
}

/// Splits an attention map over `frames` concatenated sub-grids and marks
/// every cell whose weight is at least `ratio * max(alpha)`.
pub fn binarize_attention(alpha: &[f64], frames: usize, ratio: f64) -> Vec<Vec<bool>> {
    assert!(frames > 0 && alpha.len() % frames == 0, "attention does not split evenly");
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cut = ratio * max;
    alpha
        .chunks(alpha.len() / frames)
        .map(|c| c.iter().map(|&a| a >= cut).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskKey {
    pub video: String,
    pub class: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoMasks {
    pub masks: BTreeMap<MaskKey, Vec<bool>>,
    /// Lexicon tokens whose class is not in the concept table.
    pub skipped: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub video: String,
    pub class: usize,
    pub class_name: String,
    pub frame: usize,
    pub cells: usize,
    pub path: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskIndex {
    pub grid: [usize; 2],
    pub skipped: usize,
    pub masks: Vec<MaskIndexEntry>,
}

pub struct ExportContext<'a> {
    pub vocab: &'a Vocabulary,
    pub classes: &'a ConceptClassTable,
    pub synonyms: &'a SynonymTable,
    pub lexicon: &'a BTreeSet<String>,
    pub key_frames: usize,
}

impl MetaLearner {
    /// Attention maps of concept words become per-frame binary masks,
    /// unioned over every occurrence of the class in the video's captions.
    pub fn export_pseudo_masks(
        &self,
        videos: &[VideoRecord],
        ctx: &ExportContext<'_>,
    ) -> Result<PseudoMasks> {
        let mut out = PseudoMasks::default();
        for video in videos {
            let frames = export_frames(video, ctx.key_frames, self.config.frames_sampled);
            let grid = concat_frames(&video.frames, &frames);
            for caption in &video.captions {
                let tokens = crate::corpus::tokenize(caption);
                if tokens.is_empty() {
                    continue;
                }
                let ids = ctx.vocab.encode(&tokens);
                let mut t = Tape::with_params(&self.store);
                let v = t.constant(grid.clone());
                let trace = self.forward_caption(&mut t, v, &ids)?;
                for (i, tok) in tokens.iter().enumerate() {
                    let Some(class) = ctx.classes.class_of(tok, ctx.synonyms) else {
                        if ctx.lexicon.contains(tok) {
                            out.skipped += 1;
                        }
                        continue;
                    };
                    let alpha = t.value(trace.alphas[i]).data().to_vec();
                    let split = binarize_attention(&alpha, frames.len(), self.config.mask_threshold);
                    for (sub, &frame) in split.into_iter().zip(&frames) {
                        if !sub.iter().any(|&b| b) {
                            continue;
                        }
                        let key = MaskKey {
                            video: video.id.clone(),
                            class,
                            frame,
                        };
                        let entry = out.masks.entry(key).or_insert_with(|| vec![false; sub.len()]);
                        for (e, s) in entry.iter_mut().zip(sub) {
                            *e |= s;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl PseudoMasks {
    /// Writes `<dir>/<video>/<class>/<frame>.cmgf` grids of 0/1 and
    /// `<dir>/index.json`.
    pub fn write(&self, dir: &Path, grid: (usize, usize), classes: &ConceptClassTable) -> Result<()> {
        let mut index = MaskIndex {
            grid: [grid.0, grid.1],
            skipped: self.skipped,
            masks: Vec::new(),
        };
        for (key, mask) in &self.masks {
            let name = classes.name(key.class);
            let rel = format!("{}/{}/{}.cmgf", key.video, name, key.frame);
            let data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            FeatureTensor::new(vec![grid.0, grid.1], data)?.write(&dir.join(&rel))?;
            index.masks.push(MaskIndexEntry {
                video: key.video.clone(),
                class: key.class,
                class_name: name.to_string(),
                frame: key.frame,
                cells: mask.iter().filter(|&&b| b).count(),
                path: rel,
            });
        }
        write_file(
            &dir.join("index.json"),
            serde_json::to_string_pretty(&index).expect("index serialises"),
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = crate::error::read_text(&dir.join("index.json"))?;
        let index: MaskIndex =
            serde_json::from_str(&text).map_err(|e| Error::parse("mask index", e))?;
        let mut out = PseudoMasks {
            skipped: index.skipped,
            ..Default::default()
        };
        for e in index.masks {
            if e.path.contains("..") {
                return Err(Error::validation(format!("mask path escapes directory: {}", e.path)));
            }
            let t = FeatureTensor::read(&dir.join(&e.path))?;
            out.masks.insert(
                MaskKey {
                    video: e.video,
                    class: e.class,
                    frame: e.frame,
                },
                t.data().iter().map(|&v| v >= 0.5).collect(),
            );
        }
        Ok(out)
    }
}
