//! Multi-label concept segmenter trained on pseudo masks.
//!
//! A two-layer convolutional head (3x3 then 1x1) scores every grid cell for
//! every concept class with an independent sigmoid. A class is present on a
//! frame when its best cell reaches `threshold`; its region is every cell
//! scoring at least `region_ratio` times that best score.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::corpus::{ConceptClassTable, SynonymTable};
use crate::datagen::{FeatureGrid, VideoRecord};
use crate::error::{Error, Result};
use crate::metalearner::PseudoMasks;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub hidden: usize,
    pub threshold: f64,
    pub region_ratio: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            threshold: 0.5,
            region_ratio: 0.5,
            batch_size: 8,
            learning_rate: 0.05,
            epochs: 30,
        }
    }
}

/// 3x3 zero-padded neighbourhoods: `G x 9D`, neighbours in row-major
/// offset order.
pub fn im2col(grid: &FeatureGrid) -> Mat {
    let (h, w, d) = (grid.height(), grid.width(), grid.channels());
    let mut out = Mat::zeros(h * w, 9 * d);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            for (k, (dy, dx)) in (-1i64..=1)
                .flat_map(|dy| (-1i64..=1).map(move |dx| (dy, dx)))
                .enumerate()
            {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let src = grid.cells().row(ny as usize * w + nx as usize);
                row[k * d..(k + 1) * d].copy_from_slice(src);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Localizer {
    pub store: ParamStore,
    pub config: LocalizerConfig,
    pub channels: usize,
    pub num_classes: usize,
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
}

/// A class detected on one frame, before its semantic embedding is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetection {
    pub video: String,
    pub frame: usize,
    pub class: usize,
    /// Indices of the region's cells.
    pub cells: Vec<usize>,
    /// Mean feature of the region's cells.
    pub v: Vec<f64>,
}

/// `rep = v + s`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaConcept {
    pub class_id: usize,
    pub frame_index: usize,
    pub region: Vec<bool>,
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    pub rep: Vec<f64>,
}

impl MetaConcept {
    pub fn new(det: &ConceptDetection, grid_cells: usize, s: &[f64]) -> Self {
        let mut region = vec![false; grid_cells];
        for &c in &det.cells {
            region[c] = true;
        }
        let rep = det.v.iter().zip(s).map(|(a, b)| a + b).collect();
        Self {
            class_id: det.class,
            frame_index: det.frame,
            region,
            v: det.v.clone(),
            s: s.to_vec(),
            rep,
        }
    }
}

impl Localizer {
    pub fn new<R: Rng + ?Sized>(
        config: LocalizerConfig,
        channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let conv1 = store.add("conv1.weight", Mat::xavier(9 * channels, config.hidden, rng));
        let bias1 = store.add("conv1.bias", Mat::zeros(1, config.hidden));
        let conv2 = store.add("conv2.weight", Mat::xavier(config.hidden, num_classes, rng));
        let bias2 = store.add("conv2.bias", Mat::zeros(1, num_classes));
        Self {
            store,
            config,
            channels,
            num_classes,
            conv1,
            bias1,
            conv2,
            bias2,
        }
    }

    /// Per-cell, per-class logits, `G x K`.
    pub fn logits(&self, t: &mut Tape, patches: Var) -> Var {
        let w1 = t.param(self.conv1);
        let b1 = t.param(self.bias1);
        let w2 = t.param(self.conv2);
        let b2 = t.param(self.bias2);
        let h = t.matmul(patches, w1);
        let h = t.add_row(h, b1);
        let h = t.relu(h);
        let o = t.matmul(h, w2);
        t.add_row(o, b2)
    }

    /// Mean binary cross-entropy over cells and classes.
    pub fn bce_loss(&self, t: &mut Tape, grid: &FeatureGrid, targets: &Mat) -> Result<Var> {
        if targets.shape() != (grid.num_cells(), self.num_classes) {
            return Err(Error::validation(format!(
                "targets are {:?}, expected {} x {}",
                targets.shape(),
                grid.num_cells(),
                self.num_classes
            )));
        }
        let p = t.constant(im2col(grid));
        let z = self.logits(t, p);
        let sum = t.bce_with_logits(z, Rc::new(targets.clone()));
        Ok(t.scale(sum, 1.0 / targets.len() as f64))
    }

    /// Sigmoid scores, `G x K`.
    pub fn score_maps(&self, grid: &FeatureGrid) -> Mat {
        let mut t = Tape::with_params(&self.store);
        let p = t.constant(im2col(grid));
        let z = self.logits(&mut t, p);
        t.value(z).map(sigmoid)
    }

    /// Present classes of one frame and their regions.
    pub fn detect(&self, video: &str, frame: usize, grid: &FeatureGrid) -> Vec<ConceptDetection> {
        detect_from_scores(
            video,
            frame,
            grid,
            &self.score_maps(grid),
            self.config.threshold,
            self.config.region_ratio,
        )
    }

    /// Detections over the given frames of a video, frame by frame.
    pub fn detect_video(&self, video: &VideoRecord, frames: &[usize]) -> Vec<ConceptDetection> {
        frames
            .iter()
            .flat_map(|&f| self.detect(&video.id, f, &video.frames[f]))
            .collect()
    }

    /// Meta concepts with `s` taken from row `class` of `semantic`.
    pub fn predict_meta_concepts(
        &self,
        video: &VideoRecord,
        frames: &[usize],
        semantic: &Mat,
    ) -> Vec<MetaConcept> {
        let cells = video.frames[0].num_cells();
        self.detect_video(video, frames)
            .iter()
            .map(|d| MetaConcept::new(d, cells, semantic.row(d.class)))
            .collect()
    }
}

/// Applies the presence and region rules to precomputed scores; each class
/// column is handled on its own.
pub fn detect_from_scores(
    video: &str,
    frame: usize,
    grid: &FeatureGrid,
    scores: &Mat,
    threshold: f64,
    region_ratio: f64,
) -> Vec<ConceptDetection> {
    let mut out = Vec::new();
    for k in 0..scores.cols() {
        let col: Vec<f64> = (0..scores.rows()).map(|g| scores.get(g, k)).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max >= threshold) {
            continue;
        }
        let cells: Vec<usize> = (0..col.len()).filter(|&g| col[g] >= region_ratio * max).collect();
        let v = grid.cells().select_rows(&cells).mean_rows().into_vec();
        out.push(ConceptDetection {
            video: video.to_string(),
            frame,
            class: k,
            cells,
            v,
        });
    }
    out
}

/// One training frame: a grid and its `G x K` 0/1 target.
#[derive(Clone, Debug)]
pub struct LocalizerSample {
    pub video: usize,
    pub frame: usize,
    pub targets: Mat,
}

/// Targets for every (video, frame) with at least one mask; classes without
/// a mask on that frame are all-negative.
pub fn build_samples(
    masks: &PseudoMasks,
    videos: &[VideoRecord],
    num_classes: usize,
) -> Result<Vec<LocalizerSample>> {
    if masks.masks.is_empty() {
        return Err(Error::validation("no pseudo masks to train the localizer on"));
    }
    let index: BTreeMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let mut by_frame: BTreeMap<(usize, usize), Mat> = BTreeMap::new();
    for (key, mask) in &masks.masks {
        let vi = *index
            .get(key.video.as_str())
            .ok_or_else(|| Error::validation(format!("mask for unknown video {}", key.video)))?;
        if key.class >= num_classes {
            return Err(Error::validation(format!("mask class {} out of range", key.class)));
        }
        let cells = videos[vi].frames[0].num_cells();
        if mask.len() != cells || key.frame >= videos[vi].frames.len() {
            return Err(Error::validation(format!(
                "mask {}/{}/{} does not fit the video grid",
                key.video, key.class, key.frame
            )));
        }
        let target = by_frame
            .entry((vi, key.frame))
            .or_insert_with(|| Mat::zeros(cells, num_classes));
        for (g, &on) in mask.iter().enumerate() {
            if on {
                target.set(g, key.class, 1.0);
            }
        }
    }
    Ok(by_frame
        .into_iter()
        .map(|((video, frame), targets)| LocalizerSample { video, frame, targets })
        .collect())
}

/// Expected IoU between a fixed region of `b` cells and a uniformly random
/// region of `a` cells out of `g`: the overlap is hypergeometric.
pub fn expected_random_iou(g: usize, a: usize, b: usize) -> f64 {
    if a == 0 || b == 0 {
        return 0.0;
    }
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let total = ln_choose(g, a);
    let lo = (a + b).saturating_sub(g);
    (lo..=a.min(b))
        .map(|i| {
            let p = (ln_choose(b, i) + ln_choose(g - b, a - i) - total).exp();
            p * i as f64 / (a + b - i) as f64
        })
        .sum()
}

pub fn region_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// (frame, class) pairs scored: ground-truth regions plus false alarms.
    pub pairs: usize,
    pub false_positives: usize,
    pub mean_iou: f64,
    pub mean_random_iou: f64,
}

impl LocalizationReport {
    pub fn ratio(&self) -> f64 {
        if self.mean_random_iou > 0.0 {
            self.mean_iou / self.mean_random_iou
        } else {
            0.0
        }
    }
}

/// Localizer regions against `gt_regions` on every annotated frame. A
/// missing prediction scores 0, as does a prediction with no ground truth.
/// The baseline replaces each predicted region by a random one of equal area.
pub fn evaluate_localization(
    localizer: &Localizer,
    videos: &[VideoRecord],
    classes: &ConceptClassTable,
    synonyms: &SynonymTable,
) -> LocalizationReport {
    let mut report = LocalizationReport::default();
    let (mut iou_sum, mut rand_sum) = (0.0, 0.0);
    for video in videos {
        let Some(gt) = &video.gt_regions else { continue };
        for fr in gt {
            if fr.frame >= video.frames.len() {
                continue;
            }
            let grid = &video.frames[fr.frame];
            let g = grid.num_cells();
            let dets = localizer.detect(&video.id, fr.frame, grid);
            let mut gt_by_class: BTreeMap<usize, &Vec<usize>> = BTreeMap::new();
            for (name, cells) in &fr.regions {
                if let Some(c) = classes.class_of(name, synonyms) {
                    if !cells.is_empty() {
                        gt_by_class.insert(c, cells);
                    }
                }
            }
            for (&class, cells) in &gt_by_class {
                report.pairs += 1;
                if let Some(d) = dets.iter().find(|d| d.class == class) {
                    iou_sum += region_iou(&d.cells, cells);
                    rand_sum += expected_random_iou(g, d.cells.len(), cells.len());
                }
            }
            for d in &dets {
                if !gt_by_class.contains_key(&d.class) {
                    report.pairs += 1;
                    report.false_positives += 1;
                }
            }
        }
    }
    if report.pairs > 0 {
        report.mean_iou = iou_sum / report.pairs as f64;
        report.mean_random_iou = rand_sum / report.pairs as f64;
    }
    report
}

/// Detections as JSON Lines.
pub fn detections_to_jsonl(dets: &[ConceptDetection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detection serialises"));
        out.push('\n');
    }
    out
}
